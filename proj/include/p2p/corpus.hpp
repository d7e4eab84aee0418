#pragma once

// Dataset model: per-user interaction histories, task typing, JSONL
// ingestion/serialization, a round-trip-exact tokenizer, and a synthetic
// multi-user population generator with controllable cluster structure.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "p2p/common.hpp"

namespace p2p {

struct Interaction {
    std::string input;
    std::string output;
    int seq_index = 0;  // temporal order within the user
};

struct UserRecord {
    std::string user_id;
    std::string task_id;
    std::optional<std::string> profile_text;
    std::vector<Interaction> history;  // sorted by seq_index
};

enum class TaskKind { classification, generation, rating };

std::string to_string(TaskKind kind);
TaskKind task_kind_from_string(std::string_view s);

struct TaskSpec {
    std::string task_id;
    TaskKind kind = TaskKind::generation;
    std::vector<std::string> label_set;  // classification / rating only
    void validate() const;
};

struct Population {
    std::vector<UserRecord> users;
    std::map<std::string, TaskSpec> tasks;

    const UserRecord* find_user(std::string_view user_id) const;
    const TaskSpec& task_of(const UserRecord& u) const;
};

// The final ceil(25%) of a user's interactions are held out as prediction
// targets; everything before is profile source material.
int profile_target_split(const UserRecord& u);
std::span<const Interaction> profile_span(const UserRecord& u);
std::span<const Interaction> target_span(const UserRecord& u);

// ---------------------------------------------------------------------------
// JSONL ingestion
//
// One user per line:
//   {"user_id": str, "task_id": str, "profile": str|null,
//    "history": [{"input": str, "output": str}, ...]}
// Unknown keys are ignored with a warning.

Population load_jsonl(const std::string& path, std::vector<std::string>* warnings = nullptr);
void save_jsonl(const Population& pop, const std::string& path);

// ---------------------------------------------------------------------------
// tokenizer
//
// Text is segmented into alphanumeric word runs and single non-word
// characters. Known segments map to vocab tokens; unknown segments fall back
// to per-byte tokens, so decode(encode(s)) == s for any string.

// raw segments, byte-exact cover of the text
std::vector<std::string> segment_text(std::string_view text);
// lowercased word segments only (retrieval / summaries / metrics)
std::vector<std::string> word_tokens(std::string_view text);

class Vocab {
public:
    static constexpr int kPad = 0, kBos = 1, kEos = 2, kSep = 3, kUnk = 4;
    static constexpr int kByteBase = 5;           // byte tokens occupy [5, 261)
    static constexpr int kFirstWordId = 5 + 256;

    static Vocab build(std::span<const std::string> texts, int cap = 4096);

    std::vector<int> encode(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;  // reserved ids render empty

    int size() const { return static_cast<int>(id_to_token_.size()); }
    const std::string& token(int id) const { return id_to_token_[static_cast<size_t>(id)]; }
    int id_of(std::string_view segment) const;

    std::string to_json() const;
    static Vocab from_json(const std::string& json_text);

private:
    std::vector<std::string> id_to_token_;
    std::unordered_map<std::string, int> token_to_id_;
};

// ---------------------------------------------------------------------------
// synthetic populations
//
// Users are grouped into clusters; each cluster carries a hidden behavior
// rule (input->label table for classification, a style marker for
// generation, a rating offset for rating). Cluster identity is recoverable
// from the user_id ("c<idx>-u<idx>") for analysis code and tests.

struct SynthSpec {
    int n_clusters = 2;
    int users_per_cluster = 10;
    int history_len = 8;
    TaskKind kind = TaskKind::classification;
    uint64_t seed = 0;

    // none:     users carry no pre-existing profile (profiles get built
    //           from history downstream)
    // traits:   profile text lists cluster trait words and the cluster's
    //           typical answer
    // blind:    trait words only, no answer-revealing clause
    enum class ProfileMode { none, traits, blind };
    ProfileMode profile_mode = ProfileMode::none;
};

Population synth_population(const SynthSpec& spec);
int synth_cluster_of_user(std::string_view user_id);  // -1 if not synthetic

}  // namespace p2p
