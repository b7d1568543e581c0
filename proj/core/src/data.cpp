#include "pymx/data.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <fstream>
#include <istream>
#include <numeric>
#include <ostream>
#include <random>
#include <sstream>

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include "pymx/error.hpp"

namespace pymx {

namespace {

constexpr std::array<std::string_view, 19> kMl100kGenres = {
    "unknown", "Action",    "Adventure", "Animation", "Children's", "Comedy",  "Crime",
    "Documentary", "Drama", "Fantasy",   "Film-Noir", "Horror",     "Musical", "Mystery",
    "Romance",     "Sci-Fi", "Thriller", "War",       "Western"};

std::vector<std::string_view> split(std::string_view s, std::string_view sep) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    while (true) {
        auto pos = s.find(sep, start);
        if (pos == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, pos - start));
        start = pos + sep.size();
    }
}

std::string_view trim_cr(std::string_view s) {
    while (!s.empty() && (s.back() == '\r' || s.back() == '\n')) s.remove_suffix(1);
    return s;
}

bool is_blank(std::string_view s) {
    return std::all_of(s.begin(), s.end(), [](char c) { return c == ' ' || c == '\t'; });
}

template <typename Int>
std::optional<Int> parse_int(std::string_view s) {
    while (!s.empty() && s.front() == ' ') s.remove_prefix(1);
    while (!s.empty() && s.back() == ' ') s.remove_suffix(1);
    Int value{};
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value);
    if (ec != std::errc() || ptr != s.data() + s.size() || s.empty()) return std::nullopt;
    return value;
}

using GenreMap = std::unordered_map<std::string, std::string>;

/// Generic line loop: `parse` returns a record or nullopt for a malformed line.
template <typename Parse>
IngestReport read_lines(std::istream& in, Parse&& parse) {
    IngestReport report;
    std::string line;
    while (std::getline(in, line)) {
        auto view = trim_cr(line);
        if (view.empty() || is_blank(view)) continue;
        ++report.lines;
        if (auto rec = parse(view)) {
            report.records.push_back(std::move(*rec));
        } else {
            ++report.malformed;
        }
    }
    return report;
}

std::optional<InteractionRecord> parse_rating_line(std::string_view line, std::string_view sep,
                                                   const GenreMap* genres) {
    auto cols = split(line, sep);
    if (cols.size() != 4) return std::nullopt;
    auto rating = parse_int<int>(cols[2]);
    auto ts = parse_int<std::int64_t>(cols[3]);
    if (!rating || !ts || *ts < 0 || cols[0].empty() || cols[1].empty()) return std::nullopt;
    InteractionRecord r{std::string(cols[0]), std::string(cols[1]), *ts, {}};
    r.side_fields.emplace_back("rating", std::to_string(*rating));
    if (genres) {
        auto it = genres->find(r.item_id);
        r.side_fields.emplace_back("genre", it == genres->end() ? "unknown" : it->second);
    }
    return r;
}

GenreMap read_ml100k_genres(const std::filesystem::path& path) {
    GenreMap out;
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
        auto cols = split(trim_cr(line), "|");
        if (cols.size() < 5 + kMl100kGenres.size()) continue;
        std::string genre = "unknown";
        for (std::size_t g = 0; g < kMl100kGenres.size(); ++g) {
            if (cols[5 + g] == "1") {
                genre = std::string(kMl100kGenres[g]);
                break;
            }
        }
        out.emplace(std::string(cols[0]), genre);
    }
    return out;
}

GenreMap read_ml1m_genres(const std::filesystem::path& path) {
    GenreMap out;
    std::ifstream in(path, std::ios::binary);
    std::string line;
    while (std::getline(in, line)) {
        auto cols = split(trim_cr(line), "::");
        if (cols.size() != 3) continue;
        auto first = split(cols[2], "|").front();
        out.emplace(std::string(cols[0]), first.empty() ? "unknown" : std::string(first));
    }
    return out;
}

GenreMap read_amazon_categories(const std::filesystem::path& path, std::vector<std::string>& warnings) {
    GenreMap out;
    std::ifstream in(path, std::ios::binary);
    std::string line;
    std::size_t bad = 0;
    while (std::getline(in, line)) {
        auto j = nlohmann::json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.is_object() || !j.contains("asin")) {
            ++bad;
            continue;
        }
        std::string category = "unknown";
        const nlohmann::json* path_list = nullptr;
        if (j.contains("categories") && j["categories"].is_array() && !j["categories"].empty()) {
            path_list = &j["categories"][0];
        } else if (j.contains("category") && j["category"].is_array()) {
            path_list = &j["category"];
        }
        if (path_list && path_list->is_array() && !path_list->empty() && path_list->back().is_string()) {
            category = path_list->back().get<std::string>();
        }
        out.emplace(j["asin"].get<std::string>(), category);
    }
    if (bad) warnings.push_back(fmt::format("{} unreadable lines in {}", bad, path.string()));
    return out;
}

std::optional<InteractionRecord> parse_amazon_line(std::string_view line, const GenreMap* categories) {
    auto j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) return std::nullopt;
    if (!j.contains("reviewerID") || !j.contains("asin") || !j.contains("unixReviewTime")) return std::nullopt;
    if (!j["reviewerID"].is_string() || !j["asin"].is_string() || !j["unixReviewTime"].is_number_integer()) {
        return std::nullopt;
    }
    auto ts = j["unixReviewTime"].get<std::int64_t>();
    if (ts < 0) return std::nullopt;
    InteractionRecord r{j["reviewerID"].get<std::string>(), j["asin"].get<std::string>(), ts, {}};
    if (categories) {
        auto it = categories->find(r.item_id);
        r.side_fields.emplace_back("category", it == categories->end() ? "unknown" : it->second);
    }
    return r;
}

/// Canonical TSV; `schema` is fixed by the first well-formed row.
class TsvParser {
public:
    std::optional<InteractionRecord> operator()(std::string_view line) {
        auto cols = split(line, "\t");
        if (cols.size() != 3 && cols.size() != 4) return std::nullopt;
        auto ts = parse_int<std::int64_t>(cols[2]);
        if (!ts || *ts < 0 || cols[0].empty() || cols[1].empty()) return std::nullopt;
        InteractionRecord r{std::string(cols[0]), std::string(cols[1]), *ts, {}};
        if (cols.size() == 4 && !cols[3].empty()) {
            for (auto kv : split(cols[3], ",")) {
                auto eq = kv.find('=');
                if (eq == std::string_view::npos || eq == 0) return std::nullopt;
                r.side_fields.emplace_back(std::string(kv.substr(0, eq)), std::string(kv.substr(eq + 1)));
            }
        }
        std::vector<std::string> names;
        for (const auto& [k, v] : r.side_fields) names.push_back(k);
        if (!schema_) {
            schema_ = names;
        } else if (*schema_ != names) {
            return std::nullopt;
        }
        return r;
    }

private:
    std::optional<std::vector<std::string>> schema_;
};

void finalize(IngestReport& report, std::string_view source) {
    if (report.lines == 0) {
        report.warnings.push_back(fmt::format("{}: no interaction lines", source));
        return;
    }
    const double frac = static_cast<double>(report.malformed) / static_cast<double>(report.lines);
    if (frac > kMaxMalformedFraction) {
        throw DataError(fmt::format("{}: {} of {} lines malformed ({:.2f}% > {:.0f}%)", source, report.malformed,
                                    report.lines, 100.0 * frac, 100.0 * kMaxMalformedFraction));
    }
    if (report.malformed) {
        report.warnings.push_back(fmt::format("{}: skipped {} malformed lines", source, report.malformed));
    }
}

IngestReport ingest_impl(std::istream& in, DataFormat format, const GenreMap* side) {
    switch (format) {
        case DataFormat::movielens_100k:
            return read_lines(in, [&](std::string_view l) { return parse_rating_line(l, "\t", side); });
        case DataFormat::movielens_1m:
            return read_lines(in, [&](std::string_view l) { return parse_rating_line(l, "::", side); });
        case DataFormat::amazon_beauty:
            return read_lines(in, [&](std::string_view l) { return parse_amazon_line(l, side); });
        case DataFormat::canonical_tsv: {
            TsvParser parser;
            return read_lines(in, parser);
        }
    }
    throw ConfigError("unsupported data format");
}

std::filesystem::path resolve_file(const std::filesystem::path& path, std::string_view default_name) {
    if (std::filesystem::is_directory(path)) return path / std::string(default_name);
    return path;
}

void check_token(const std::string& s, std::string_view forbidden, std::string_view what) {
    if (s.find_first_of(forbidden) != std::string::npos) {
        throw DataError(fmt::format("cannot write {} '{}' to canonical TSV: contains a reserved character", what, s));
    }
}

}  // namespace

DataFormat parse_data_format(std::string_view name) {
    if (name == "movielens-100k") return DataFormat::movielens_100k;
    if (name == "movielens-1m") return DataFormat::movielens_1m;
    if (name == "amazon-beauty") return DataFormat::amazon_beauty;
    if (name == "canonical-tsv") return DataFormat::canonical_tsv;
    throw ConfigError(fmt::format(
        "unknown data format '{}' (expected movielens-100k, movielens-1m, amazon-beauty or canonical-tsv)", name));
}

std::string_view to_string(DataFormat f) noexcept {
    switch (f) {
        case DataFormat::movielens_100k: return "movielens-100k";
        case DataFormat::movielens_1m: return "movielens-1m";
        case DataFormat::amazon_beauty: return "amazon-beauty";
        case DataFormat::canonical_tsv: return "canonical-tsv";
    }
    return "unknown";
}

IngestReport ingest(const std::filesystem::path& path, DataFormat format) {
    std::filesystem::path file;
    std::optional<GenreMap> side;
    std::vector<std::string> warnings;
    switch (format) {
        case DataFormat::movielens_100k: {
            file = resolve_file(path, "u.data");
            auto items = file.parent_path() / "u.item";
            if (std::filesystem::exists(items)) {
                side = read_ml100k_genres(items);
            } else {
                warnings.push_back("u.item not found next to " + file.string() + "; genre field omitted");
            }
            break;
        }
        case DataFormat::movielens_1m: {
            file = resolve_file(path, "ratings.dat");
            auto movies = file.parent_path() / "movies.dat";
            if (std::filesystem::exists(movies)) {
                side = read_ml1m_genres(movies);
            } else {
                warnings.push_back("movies.dat not found next to " + file.string() + "; genre field omitted");
            }
            break;
        }
        case DataFormat::amazon_beauty: {
            file = resolve_file(path, "reviews_Beauty_5.json");
            auto meta = file.parent_path() / "meta_Beauty.json";
            if (std::filesystem::exists(meta)) {
                side = read_amazon_categories(meta, warnings);
            } else {
                warnings.push_back("meta_Beauty.json not found next to " + file.string() + "; category field omitted");
            }
            break;
        }
        case DataFormat::canonical_tsv:
            file = path;
            break;
    }
    std::ifstream in(file, std::ios::binary);
    if (!in) throw DataError("cannot open " + file.string());
    auto report = ingest_impl(in, format, side ? &*side : nullptr);
    finalize(report, file.string());
    warnings.insert(warnings.end(), report.warnings.begin(), report.warnings.end());
    report.warnings = std::move(warnings);
    return report;
}

IngestReport ingest_stream(std::istream& in, DataFormat format) {
    auto report = ingest_impl(in, format, nullptr);
    finalize(report, "<stream>");
    return report;
}

void write_canonical_tsv(std::ostream& out, std::span<const InteractionRecord> records) {
    for (const auto& r : records) {
        check_token(r.user_id, "\t\n\r", "user id");
        check_token(r.item_id, "\t\n\r", "item id");
        out << r.user_id << '\t' << r.item_id << '\t' << r.timestamp;
        if (!r.side_fields.empty()) {
            out << '\t';
            for (std::size_t i = 0; i < r.side_fields.size(); ++i) {
                check_token(r.side_fields[i].first, "\t\n\r,=", "field name");
                check_token(r.side_fields[i].second, "\t\n\r,", "field value");
                if (i) out << ',';
                out << r.side_fields[i].first << '=' << r.side_fields[i].second;
            }
        }
        out << '\n';
    }
}

std::vector<InteractionRecord> filter_k_core(std::vector<InteractionRecord> records, std::size_t k) {
    if (k <= 1) return records;
    while (true) {
        std::unordered_map<std::string, std::size_t> users, items;
        for (const auto& r : records) {
            ++users[r.user_id];
            ++items[r.item_id];
        }
        auto keep = [&](const InteractionRecord& r) { return users[r.user_id] >= k && items[r.item_id] >= k; };
        const auto before = records.size();
        std::erase_if(records, [&](const InteractionRecord& r) { return !keep(r); });
        if (records.size() == before) return records;
    }
}

Vocab::Vocab(std::string name) : name_(std::move(name)), values_{"<pad>", "<unk>"} {}

std::int32_t Vocab::add(const std::string& value) {
    auto [it, inserted] = index_.try_emplace(value, static_cast<std::int32_t>(values_.size()));
    if (inserted) values_.push_back(value);
    return it->second;
}

std::int32_t Vocab::lookup(const std::string& value) const {
    auto it = index_.find(value);
    return it == index_.end() ? kUnknown : it->second;
}

const std::string& Vocab::value(std::int32_t index) const {
    if (index < 0 || index >= size()) {
        throw DataError(fmt::format("vocab '{}': index {} out of range [0, {})", name_, index, size()));
    }
    return values_[static_cast<std::size_t>(index)];
}

nlohmann::json Vocab::to_json() const {
    return nlohmann::json(std::vector<std::string>(values_.begin() + 2, values_.end()));
}

Vocab Vocab::from_json(const std::string& name, const nlohmann::json& j) {
    if (!j.is_array()) throw FormatError("vocab '" + name + "' must be a JSON array of values");
    Vocab v(name);
    for (const auto& e : j) {
        if (!e.is_string()) throw FormatError("vocab '" + name + "' holds a non-string value");
        const auto before = v.size();
        v.add(e.get<std::string>());
        if (v.size() == before) throw FormatError("vocab '" + name + "' repeats value " + e.get<std::string>());
    }
    return v;
}

std::vector<std::int64_t> Dataset::vocab_sizes() const {
    std::vector<std::int64_t> out;
    for (const auto& v : vocabs) out.push_back(v.size());
    return out;
}

std::size_t Dataset::num_interactions() const {
    std::size_t n = 0;
    for (const auto& u : users) n += static_cast<std::size_t>(u.length());
    return n;
}

Dataset build_dataset(std::span<const InteractionRecord> records) {
    Dataset ds;
    ds.field_names.push_back("item");
    if (!records.empty()) {
        for (const auto& [name, value] : records.front().side_fields) ds.field_names.push_back(name);
    }
    for (const auto& name : ds.field_names) ds.vocabs.emplace_back(name);
    const auto nf = ds.num_fields();

    struct Event {
        std::int64_t ts;
        std::size_t order;
        std::size_t record;
    };
    std::unordered_map<std::string, std::size_t> user_index;
    std::vector<std::vector<Event>> events;
    std::vector<std::string> user_ids;
    for (std::size_t i = 0; i < records.size(); ++i) {
        const auto& r = records[i];
        if (static_cast<std::int32_t>(r.side_fields.size()) + 1 != nf) {
            throw DataError(fmt::format("record {} has {} side fields, expected {}", i, r.side_fields.size(), nf - 1));
        }
        for (std::int32_t f = 1; f < nf; ++f) {
            if (r.side_fields[static_cast<std::size_t>(f - 1)].first != ds.field_names[static_cast<std::size_t>(f)]) {
                throw DataError(fmt::format("record {} field order differs from the dataset schema", i));
            }
        }
        auto [it, inserted] = user_index.try_emplace(r.user_id, user_ids.size());
        if (inserted) {
            user_ids.push_back(r.user_id);
            events.emplace_back();
        }
        events[it->second].push_back({r.timestamp, i, i});
    }
    // Vocab indices follow first appearance in the input.
    for (const auto& r : records) {
        ds.vocabs[0].add(r.item_id);
        for (std::int32_t f = 1; f < nf; ++f) {
            ds.vocabs[static_cast<std::size_t>(f)].add(r.side_fields[static_cast<std::size_t>(f - 1)].second);
        }
    }
    for (std::size_t u = 0; u < user_ids.size(); ++u) {
        auto& ev = events[u];
        std::stable_sort(ev.begin(), ev.end(), [](const Event& a, const Event& b) { return a.ts < b.ts; });
        UserSequence seq;
        seq.user_id = user_ids[u];
        seq.num_fields = nf;
        for (const auto& e : ev) {
            const auto& r = records[e.record];
            seq.timestamps.push_back(r.timestamp);
            seq.fields.push_back(ds.vocabs[0].lookup(r.item_id));
            for (std::int32_t f = 1; f < nf; ++f) {
                seq.fields.push_back(
                    ds.vocabs[static_cast<std::size_t>(f)].lookup(r.side_fields[static_cast<std::size_t>(f - 1)].second));
            }
        }
        ds.users.push_back(std::move(seq));
    }
    return ds;
}

std::vector<InteractionRecord> to_records(const Dataset& ds) {
    std::vector<InteractionRecord> out;
    for (const auto& u : ds.users) {
        for (std::int32_t p = 0; p < u.length(); ++p) {
            InteractionRecord r;
            r.user_id = u.user_id;
            r.timestamp = u.timestamps[static_cast<std::size_t>(p)];
            r.item_id = ds.vocabs[0].value(u.item(p));
            for (std::int32_t f = 1; f < ds.num_fields(); ++f) {
                r.side_fields.emplace_back(ds.field_names[static_cast<std::size_t>(f)],
                                           ds.vocabs[static_cast<std::size_t>(f)].value(
                                               u.fields[static_cast<std::size_t>(p * u.num_fields + f)]));
            }
            out.push_back(std::move(r));
        }
    }
    return out;
}

Splits split_leave_one_out(Dataset& ds, std::size_t min_core) {
    Splits splits;
    const auto nf = static_cast<std::size_t>(ds.num_fields());
    if (min_core > 1) {
        while (true) {
            std::vector<std::size_t> item_count(static_cast<std::size_t>(ds.num_items()), 0);
            for (const auto& u : ds.users) {
                for (std::int32_t p = 0; p < u.length(); ++p) ++item_count[static_cast<std::size_t>(u.item(p))];
            }
            bool changed = false;
            std::vector<UserSequence> kept;
            for (auto& u : ds.users) {
                UserSequence next{u.user_id, {}, {}, u.num_fields};
                for (std::int32_t p = 0; p < u.length(); ++p) {
                    if (item_count[static_cast<std::size_t>(u.item(p))] < min_core) continue;
                    next.timestamps.push_back(u.timestamps[static_cast<std::size_t>(p)]);
                    auto first = u.fields.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(p) * nf);
                    next.fields.insert(next.fields.end(), first, first + static_cast<std::ptrdiff_t>(nf));
                }
                if (static_cast<std::size_t>(next.length()) < min_core) {
                    changed = true;
                    ++splits.dropped_users;
                    continue;
                }
                if (next.length() != u.length()) changed = true;
                kept.push_back(std::move(next));
            }
            ds.users = std::move(kept);
            if (!changed) break;
        }
    }
    std::vector<UserSequence> viable;
    for (auto& u : ds.users) {
        if (u.length() < 3) {
            ++splits.dropped_users;
            continue;
        }
        viable.push_back(std::move(u));
    }
    ds.users = std::move(viable);
    for (std::int32_t u = 0; u < static_cast<std::int32_t>(ds.users.size()); ++u) {
        const auto n = ds.users[static_cast<std::size_t>(u)].length();
        for (std::int32_t end = 1; end <= n - 3; ++end) splits.train.push_back({u, end});
        splits.valid.push_back({u, n - 2});
        splits.test.push_back({u, n - 1});
    }
    return splits;
}

PreparedData prepare_dataset(const std::filesystem::path& path, DataFormat format, std::size_t min_core) {
    auto report = ingest(path, format);
    PreparedData out;
    out.lines = report.lines;
    out.malformed = report.malformed;
    out.raw_records = report.records.size();
    out.warnings = std::move(report.warnings);
    out.kept = filter_k_core(std::move(report.records), min_core);
    if (out.kept.empty()) throw DataError(fmt::format("no interactions survive the {}-core filter", min_core));
    out.dataset = build_dataset(out.kept);
    out.splits = split_leave_one_out(out.dataset, min_core);
    if (out.splits.dropped_users > 0) {
        out.warnings.push_back(fmt::format("dropped {} users with fewer than 3 behaviors", out.splits.dropped_users));
    }
    return out;
}

Batch make_batch(const Dataset& ds, std::span<const Example> examples, std::int64_t max_len) {
    Batch batch;
    batch.size = static_cast<std::int64_t>(examples.size());
    batch.max_len = max_len;
    batch.num_fields = ds.num_fields();
    const auto cells = static_cast<std::size_t>(batch.size * max_len);
    batch.fields.assign(static_cast<std::size_t>(batch.num_fields), std::vector<std::int32_t>(cells, Vocab::kPad));
    batch.mask.assign(cells, 0);
    for (std::size_t b = 0; b < examples.size(); ++b) {
        const auto& ex = examples[b];
        const auto& seq = ds.users.at(static_cast<std::size_t>(ex.user));
        if (ex.end < 0 || ex.end >= seq.length()) {
            throw DataError(fmt::format("example end {} outside sequence of user {} (length {})", ex.end,
                                        seq.user_id, seq.length()));
        }
        const auto start = std::max<std::int64_t>(0, ex.end - max_len);
        const auto len = ex.end - start;
        const auto pad = max_len - len;
        for (std::int64_t t = 0; t < len; ++t) {
            const auto cell = static_cast<std::size_t>(static_cast<std::int64_t>(b) * max_len + pad + t);
            batch.mask[cell] = 1;
            for (std::int64_t f = 0; f < batch.num_fields; ++f) {
                batch.fields[static_cast<std::size_t>(f)][cell] =
                    seq.fields[static_cast<std::size_t>((start + t) * seq.num_fields + f)];
            }
        }
        batch.targets.push_back(seq.item(ex.end));
        batch.users.push_back(ex.user);
    }
    return batch;
}

Batch slice_batch(const Batch& batch, std::int64_t first, std::int64_t count) {
    if (first < 0 || count < 1 || first + count > batch.size) {
        throw ContractError(fmt::format("batch slice [{}, {}) outside batch of {}", first, first + count, batch.size));
    }
    Batch out;
    out.size = count;
    out.max_len = batch.max_len;
    out.num_fields = batch.num_fields;
    const auto lo = first * batch.max_len, hi = (first + count) * batch.max_len;
    for (const auto& f : batch.fields) out.fields.emplace_back(f.begin() + lo, f.begin() + hi);
    out.mask.assign(batch.mask.begin() + lo, batch.mask.begin() + hi);
    out.targets.assign(batch.targets.begin() + first, batch.targets.begin() + first + count);
    out.users.assign(batch.users.begin() + first, batch.users.begin() + first + count);
    return out;
}

BatchStream::BatchStream(const Dataset& ds, std::span<const Example> view, std::int64_t max_len,
                         std::int64_t batch_size, std::optional<std::uint64_t> shuffle_seed)
    : ds_(&ds), order_(view.begin(), view.end()), max_len_(max_len), batch_size_(batch_size) {
    if (max_len <= 0 || batch_size <= 0) {
        throw ConfigError(fmt::format("batch stream needs positive length and batch size, got {} / {}", max_len,
                                      batch_size));
    }
    if (shuffle_seed) {
        std::mt19937_64 rng(*shuffle_seed);
        std::shuffle(order_.begin(), order_.end(), rng);
    }
}

std::optional<Batch> BatchStream::next() {
    if (cursor_ >= order_.size()) return std::nullopt;
    const auto n = std::min(order_.size() - cursor_, static_cast<std::size_t>(batch_size_));
    auto batch = make_batch(*ds_, std::span<const Example>(order_).subspan(cursor_, n), max_len_);
    cursor_ += n;
    return batch;
}

std::size_t BatchStream::num_batches() const noexcept {
    const auto b = static_cast<std::size_t>(batch_size_);
    return (order_.size() + b - 1) / b;
}

std::vector<std::int32_t> history_items(const Dataset& ds, const Example& ex) {
    const auto& seq = ds.users.at(static_cast<std::size_t>(ex.user));
    std::vector<std::int32_t> out;
    out.reserve(static_cast<std::size_t>(ex.end));
    for (std::int32_t p = 0; p < ex.end; ++p) out.push_back(seq.item(p));
    return out;
}

}  // namespace pymx
