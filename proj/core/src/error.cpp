#include "pymx/error.hpp"

namespace pymx {

std::string_view to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return "config";
        case ErrorKind::data: return "data";
        case ErrorKind::divergence: return "divergence";
        case ErrorKind::format: return "format";
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::state: return "state";
        case ErrorKind::contract: return "contract";
        case ErrorKind::internal: break;
    }
    return "internal";
}

int exit_code(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::config: return 2;
        case ErrorKind::data: return 3;
        case ErrorKind::divergence: return 4;
        case ErrorKind::format: return 5;
        case ErrorKind::dimension:
        case ErrorKind::state:
        case ErrorKind::contract: return 6;
        case ErrorKind::internal: break;
    }
    return 1;
}

}  // namespace pymx
