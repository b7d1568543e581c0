#pragma once

// Interaction logs -> vocabularies -> chronological user sequences ->
// leave-one-out splits -> padded batches.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace pymx {

struct InteractionRecord {
    std::string user_id;
    std::string item_id;
    std::int64_t timestamp = 0;
    std::vector<std::pair<std::string, std::string>> side_fields;

    bool operator==(const InteractionRecord&) const = default;
};

enum class DataFormat { movielens_100k, movielens_1m, amazon_beauty, canonical_tsv };

DataFormat parse_data_format(std::string_view name);
std::string_view to_string(DataFormat f) noexcept;

struct IngestReport {
    std::vector<InteractionRecord> records;
    std::size_t lines = 0;
    std::size_t malformed = 0;
    std::vector<std::string> warnings;
};

/// Share of malformed lines above which ingestion fails with a DataError.
inline constexpr double kMaxMalformedFraction = 0.01;

/// Reads a dataset in one of the supported layouts.
///
/// movielens-100k: `path` is u.data (or the directory holding it); genres are
///   taken from a sibling u.item when present.
/// movielens-1m: ratings.dat (or its directory); genres from movies.dat.
/// amazon-beauty: review JSON-lines; categories from a sibling meta file
///   (meta_Beauty.json) when present.
/// canonical-tsv: `user<TAB>item<TAB>timestamp<TAB>field=value[,field=value]`.
IngestReport ingest(const std::filesystem::path& path, DataFormat format);

/// Same readers over an in-memory stream (no sibling metadata).
IngestReport ingest_stream(std::istream& in, DataFormat format);

void write_canonical_tsv(std::ostream& out, std::span<const InteractionRecord> records);

/// Iteratively drops records of users and items with fewer than `k`
/// interactions until every survivor has at least `k`. Order is preserved.
std::vector<InteractionRecord> filter_k_core(std::vector<InteractionRecord> records, std::size_t k);

/// Index 0 is padding and 1 is unknown; real values start at 2.
class Vocab {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kUnknown = 1;

    explicit Vocab(std::string name = {});

    const std::string& name() const noexcept { return name_; }
    std::int32_t add(const std::string& value);
    std::int32_t lookup(const std::string& value) const;
    const std::string& value(std::int32_t index) const;
    std::int32_t size() const noexcept { return static_cast<std::int32_t>(values_.size()); }

    nlohmann::json to_json() const;
    static Vocab from_json(const std::string& name, const nlohmann::json& j);

    bool operator==(const Vocab& other) const { return name_ == other.name_ && values_ == other.values_; }

private:
    std::string name_;
    std::vector<std::string> values_;
    std::unordered_map<std::string, std::int32_t> index_;
};

struct UserSequence {
    std::string user_id;
    std::vector<std::int64_t> timestamps;
    /// Row-major [length x num_fields]; column 0 is the item.
    std::vector<std::int32_t> fields;
    std::int32_t num_fields = 1;

    std::int32_t length() const noexcept { return static_cast<std::int32_t>(timestamps.size()); }
    std::int32_t item(std::int32_t pos) const { return fields[static_cast<std::size_t>(pos * num_fields)]; }
};

struct Dataset {
    /// Field 0 is always "item".
    std::vector<std::string> field_names;
    std::vector<Vocab> vocabs;
    std::vector<UserSequence> users;

    std::int32_t num_fields() const noexcept { return static_cast<std::int32_t>(field_names.size()); }
    std::int32_t num_items() const { return vocabs.at(0).size(); }
    std::vector<std::int64_t> vocab_sizes() const;
    std::size_t num_interactions() const;
};

/// Builds vocabularies (in order of first appearance) and per-user sequences
/// sorted by timestamp, ties kept in input order.
Dataset build_dataset(std::span<const InteractionRecord> records);

/// Records with the same field schema, in user then chronological order.
std::vector<InteractionRecord> to_records(const Dataset& ds);

/// One prediction: context is user positions [max(0, end - L), end), target is
/// the item at `end`.
struct Example {
    std::int32_t user = 0;
    std::int32_t end = 0;
    bool operator==(const Example&) const = default;
};

struct Splits {
    std::vector<Example> train;
    std::vector<Example> valid;
    std::vector<Example> test;
    std::size_t dropped_users = 0;
};

/// Applies k-core filtering to the sequences (in place), drops users shorter
/// than 3, then holds out the last behavior for test and the one before it for
/// validation. Training examples predict each behavior of the remaining
/// prefix from its predecessors.
Splits split_leave_one_out(Dataset& ds, std::size_t min_core = 5);

struct PreparedData {
    Dataset dataset;
    Splits splits;
    std::size_t lines = 0;
    std::size_t malformed = 0;
    std::size_t raw_records = 0;
    /// Records left by the k-core filter; the vocabularies index exactly these.
    std::vector<InteractionRecord> kept;
    std::vector<std::string> warnings;
};

/// ingest -> filter_k_core -> build_dataset -> split_leave_one_out.
PreparedData prepare_dataset(const std::filesystem::path& path, DataFormat format, std::size_t min_core = 5);

struct Batch {
    std::int64_t size = 0;
    std::int64_t max_len = 0;
    std::int64_t num_fields = 0;
    /// One [size x max_len] index array per field, left-padded with 0.
    std::vector<std::vector<std::int32_t>> fields;
    /// [size x max_len]; 1 at real behaviors.
    std::vector<std::uint8_t> mask;
    std::vector<std::int32_t> targets;
    std::vector<std::int32_t> users;
};

/// Rows [first, first + count) of `batch`.
Batch slice_batch(const Batch& batch, std::int64_t first, std::int64_t count);

/// Keeps the most recent `max_len` behaviors of each context, left-padded.
Batch make_batch(const Dataset& ds, std::span<const Example> examples, std::int64_t max_len);

/// Deterministically shuffled (seeded) stream of batches over a split view.
class BatchStream {
public:
    BatchStream(const Dataset& ds, std::span<const Example> view, std::int64_t max_len, std::int64_t batch_size,
                std::optional<std::uint64_t> shuffle_seed);

    std::optional<Batch> next();
    std::size_t num_batches() const noexcept;
    std::span<const Example> order() const noexcept { return order_; }

private:
    const Dataset* ds_;
    std::vector<Example> order_;
    std::int64_t max_len_;
    std::int64_t batch_size_;
    std::size_t cursor_ = 0;
};

/// Items in user positions [0, end): the history excluded from ranking.
std::vector<std::int32_t> history_items(const Dataset& ds, const Example& ex);

}  // namespace pymx
