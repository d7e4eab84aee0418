#include "p2p/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <fstream>
#include <set>

#include <json.hpp>

namespace p2p {

using ordered_json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// task typing

std::string to_string(TaskKind kind) {
    switch (kind) {
        case TaskKind::classification: return "classification";
        case TaskKind::generation: return "generation";
        case TaskKind::rating: return "rating";
    }
    fail("unreachable task kind");
}

TaskKind task_kind_from_string(std::string_view s) {
    if (s == "classification") return TaskKind::classification;
    if (s == "generation") return TaskKind::generation;
    if (s == "rating") return TaskKind::rating;
    fail_invalid("unknown task kind: \"", s, "\" (expected classification|generation|rating)");
}

void TaskSpec::validate() const {
    if (kind == TaskKind::generation) return;
    require(!label_set.empty(), "task ", task_id, ": ", to_string(kind),
            " tasks require a label set");
    if (kind == TaskKind::rating) {
        for (const auto& l : label_set) {
            int v = 0;
            auto [p, ec] = std::from_chars(l.data(), l.data() + l.size(), v);
            require(ec == std::errc() && p == l.data() + l.size() && v >= 1 && v <= 5,
                    "task ", task_id, ": rating label \"", l, "\" is not an integer in 1..5");
        }
    }
}

const UserRecord* Population::find_user(std::string_view user_id) const {
    for (const auto& u : users)
        if (u.user_id == user_id) return &u;
    return nullptr;
}

const TaskSpec& Population::task_of(const UserRecord& u) const {
    auto it = tasks.find(u.task_id);
    if (it == tasks.end()) fail("no task spec for task_id \"", u.task_id, "\"");
    return it->second;
}

int profile_target_split(const UserRecord& u) {
    const int n = static_cast<int>(u.history.size());
    const int targets = (n + 3) / 4;  // ceil(25%)
    return n - targets;
}

std::span<const Interaction> profile_span(const UserRecord& u) {
    return std::span<const Interaction>(u.history.data(),
                                        static_cast<size_t>(profile_target_split(u)));
}

std::span<const Interaction> target_span(const UserRecord& u) {
    const int t = profile_target_split(u);
    return std::span<const Interaction>(u.history.data() + t, u.history.size() - t);
}

// ---------------------------------------------------------------------------
// JSONL

namespace {

// deterministic task-kind inference from gold outputs
TaskSpec infer_task_spec(const std::string& task_id, const std::vector<std::string>& outputs) {
    TaskSpec spec;
    spec.task_id = task_id;

    bool all_ratings = !outputs.empty();
    for (const auto& o : outputs) {
        int v = 0;
        auto [p, ec] = std::from_chars(o.data(), o.data() + o.size(), v);
        if (!(ec == std::errc() && p == o.data() + o.size() && v >= 1 && v <= 5)) {
            all_ratings = false;
            break;
        }
    }
    if (all_ratings) {
        spec.kind = TaskKind::rating;
        spec.label_set = {"1", "2", "3", "4", "5"};
        return spec;
    }

    std::set<std::string> distinct(outputs.begin(), outputs.end());
    if (!distinct.empty() && distinct.size() <= 24) {
        spec.kind = TaskKind::classification;
        spec.label_set.assign(distinct.begin(), distinct.end());
        return spec;
    }

    spec.kind = TaskKind::generation;
    return spec;
}

void warn_unknown_keys(const ordered_json& obj, std::initializer_list<const char*> known,
                       int line_no, std::vector<std::string>* warnings) {
    if (!warnings) return;
    for (auto it = obj.begin(); it != obj.end(); ++it) {
        bool found = false;
        for (const char* k : known) found = found || it.key() == k;
        if (!found)
            warnings->push_back(strcat_msg("line ", line_no, ": ignoring unknown key \"",
                                           it.key(), "\""));
    }
}

}  // namespace

Population load_jsonl(const std::string& path, std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) fail("cannot open dataset: ", path);

    Population pop;
    std::set<std::string> seen_ids;
    std::map<std::string, std::vector<std::string>> outputs_by_task;

    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        ordered_json j;
        try {
            j = ordered_json::parse(line);
        } catch (const std::exception& e) {
            fail(path, ":", line_no, ": malformed JSON: ", e.what());
        }
        if (!j.is_object()) fail(path, ":", line_no, ": expected a JSON object");
        if (!j.contains("user_id") || !j["user_id"].is_string())
            fail(path, ":", line_no, ": missing or non-string \"user_id\"");
        if (!j.contains("history") || !j["history"].is_array())
            fail(path, ":", line_no, ": missing or non-array \"history\"");
        warn_unknown_keys(j, {"user_id", "task_id", "profile", "history"}, line_no, warnings);

        UserRecord u;
        u.user_id = j["user_id"].get<std::string>();
        if (!seen_ids.insert(u.user_id).second)
            fail(path, ":", line_no, ": duplicate user_id \"", u.user_id, "\"");
        u.task_id = j.value("task_id", std::string("default"));
        if (j.contains("profile") && !j["profile"].is_null())
            u.profile_text = j["profile"].get<std::string>();

        int seq = 0;
        for (const auto& item : j["history"]) {
            if (!item.is_object() || !item.contains("input") || !item.contains("output"))
                fail(path, ":", line_no, ": history item ", seq,
                     " must be an object with \"input\" and \"output\"");
            warn_unknown_keys(item, {"input", "output"}, line_no, warnings);
            Interaction it;
            it.input = item["input"].get<std::string>();
            it.output = item["output"].get<std::string>();
            it.seq_index = seq++;
            if (it.output.empty())
                fail(path, ":", line_no, ": history item ", it.seq_index, " has empty output");
            u.history.push_back(std::move(it));
        }
        for (const auto& it : u.history) outputs_by_task[u.task_id].push_back(it.output);
        pop.users.push_back(std::move(u));
    }

    for (const auto& [task_id, outputs] : outputs_by_task) {
        TaskSpec spec = infer_task_spec(task_id, outputs);
        spec.validate();
        pop.tasks.emplace(task_id, std::move(spec));
    }
    return pop;
}

void save_jsonl(const Population& pop, const std::string& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) fail("cannot open for writing: ", path);
    for (const auto& u : pop.users) {
        ordered_json j;
        j["user_id"] = u.user_id;
        j["task_id"] = u.task_id;
        if (u.profile_text)
            j["profile"] = *u.profile_text;
        else
            j["profile"] = nullptr;
        j["history"] = ordered_json::array();
        for (const auto& it : u.history) {
            ordered_json item;
            item["input"] = it.input;
            item["output"] = it.output;
            j["history"].push_back(std::move(item));
        }
        out << j.dump() << "\n";
    }
    if (!out) fail("error writing: ", path);
}

// ---------------------------------------------------------------------------
// tokenizer

namespace {
bool is_word_char(unsigned char c) { return std::isalnum(c) != 0; }
}  // namespace

std::vector<std::string> segment_text(std::string_view text) {
    std::vector<std::string> segs;
    size_t i = 0;
    while (i < text.size()) {
        if (is_word_char(static_cast<unsigned char>(text[i]))) {
            size_t j = i;
            while (j < text.size() && is_word_char(static_cast<unsigned char>(text[j]))) ++j;
            segs.emplace_back(text.substr(i, j - i));
            i = j;
        } else {
            segs.emplace_back(text.substr(i, 1));
            ++i;
        }
    }
    return segs;
}

std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> words;
    for (auto& s : segment_text(text)) {
        if (!is_word_char(static_cast<unsigned char>(s[0]))) continue;
        for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
        words.push_back(std::move(s));
    }
    return words;
}

Vocab Vocab::build(std::span<const std::string> texts, int cap) {
    require(cap > kFirstWordId, "Vocab::build: cap ", cap, " leaves no room for word tokens");
    std::map<std::string, int64_t> freq;
    for (const auto& t : texts)
        for (auto& s : segment_text(t)) ++freq[s];

    std::vector<std::pair<std::string, int64_t>> ranked(freq.begin(), freq.end());
    std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });

    Vocab v;
    v.id_to_token_ = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
    for (int b = 0; b < 256; ++b) {
        char buf[8];
        std::snprintf(buf, sizeof buf, "<0x%02X>", b);
        v.id_to_token_.emplace_back(buf);
    }
    for (const auto& [seg, count] : ranked) {
        if (static_cast<int>(v.id_to_token_.size()) >= cap) break;
        v.id_to_token_.push_back(seg);
    }
    for (int id = kFirstWordId; id < static_cast<int>(v.id_to_token_.size()); ++id)
        v.token_to_id_.emplace(v.id_to_token_[static_cast<size_t>(id)], id);
    return v;
}

int Vocab::id_of(std::string_view segment) const {
    auto it = token_to_id_.find(std::string(segment));
    return it == token_to_id_.end() ? -1 : it->second;
}

std::vector<int> Vocab::encode(std::string_view text) const {
    std::vector<int> ids;
    for (const auto& seg : segment_text(text)) {
        int id = id_of(seg);
        if (id >= 0) {
            ids.push_back(id);
        } else {
            for (unsigned char c : seg) ids.push_back(kByteBase + c);
        }
    }
    return ids;
}

std::string Vocab::decode(std::span<const int> ids) const {
    std::string out;
    for (int id : ids) {
        require(id >= 0 && id < size(), "Vocab::decode: id ", id, " out of range [0,", size(),
                ")");
        if (id < kByteBase) continue;  // reserved ids render empty
        if (id < kFirstWordId) {
            out.push_back(static_cast<char>(id - kByteBase));
        } else {
            out += id_to_token_[static_cast<size_t>(id)];
        }
    }
    return out;
}

std::string Vocab::to_json() const {
    ordered_json j;
    j["format"] = "p2p-vocab-v1";
    j["tokens"] = ordered_json::array();
    for (int id = kFirstWordId; id < size(); ++id)
        j["tokens"].push_back(id_to_token_[static_cast<size_t>(id)]);
    return j.dump();
}

Vocab Vocab::from_json(const std::string& json_text) {
    ordered_json j = ordered_json::parse(json_text);
    require(j.value("format", std::string()) == "p2p-vocab-v1", "Vocab: unrecognized format");
    std::vector<std::string> none;
    Vocab v = build(none, kFirstWordId + 1);
    v.id_to_token_.resize(static_cast<size_t>(kFirstWordId));
    v.token_to_id_.clear();
    for (const auto& t : j["tokens"]) {
        v.token_to_id_.emplace(t.get<std::string>(), static_cast<int>(v.id_to_token_.size()));
        v.id_to_token_.push_back(t.get<std::string>());
    }
    return v;
}

// ---------------------------------------------------------------------------
// synthetic populations

namespace {

const char* kItemWords[] = {"amber", "basil", "cobalt", "dune", "ember", "fjord"};
constexpr int kNumItems = 6;

const char* kLabelWords[] = {"north", "south", "east",  "west",  "ridge", "marsh", "grove",
                             "cliff", "shoal", "heath", "vale",  "crag",  "fen",   "tarn",
                             "butte", "mesa",  "knoll", "gulch", "swale", "bluff", "cove",
                             "reef",  "atoll", "cape",  "strait", "sound"};
constexpr int kNumLabelWords = 26;

const char* kStyleWords[] = {"breezy", "stormy", "quiet",  "vivid",  "mellow", "brisk",
                             "hazy",   "crisp",  "gentle", "sombre", "spry",   "lucid",
                             "rustic", "sleek",  "plain",  "ornate", "muted",  "bold",
                             "airy",   "dense",  "warm",   "cool",   "soft",   "stark",
                             "light",  "grave"};

const char* kTraitWords[] = {"gardens",  "rivers",  "castles", "markets", "forests", "harbors",
                             "orchards", "bridges", "temples", "canyons", "meadows", "lantern",
                             "compass",  "anchors", "saddles", "quarry",  "mills",   "towers",
                             "cellars",  "arbors",  "spires",  "wharves", "grottos", "plazas",
                             "bazaar",   "chapels", "stables", "forges",  "archives", "glades",
                             "terraces", "vaults"};
constexpr int kNumTraitWords = 32;

// cluster rule tables, all derived from (spec, cluster)
int synth_label_index(const SynthSpec& spec, int cluster, int item) {
    return (item + cluster) % spec.n_clusters;
}

int synth_rating(const SynthSpec& spec, int cluster, int item) {
    const int base = 1 + (item * 7 + 3) % 5;
    const int offset = cluster % 5 - 2;
    return std::clamp(base + offset, 1, 5);
}

std::string synth_input(TaskKind kind, int item) {
    switch (kind) {
        case TaskKind::classification: return strcat_msg("tag item ", kItemWords[item]);
        case TaskKind::generation: return strcat_msg("write about ", kItemWords[item]);
        case TaskKind::rating: return strcat_msg("rate item ", kItemWords[item]);
    }
    fail("unreachable");
}

std::string synth_output(const SynthSpec& spec, int cluster, int item) {
    switch (spec.kind) {
        case TaskKind::classification:
            return kLabelWords[synth_label_index(spec, cluster, item)];
        case TaskKind::generation:
            return strcat_msg(kStyleWords[cluster % 26], " piece on ", kItemWords[item]);
        case TaskKind::rating:
            return std::to_string(synth_rating(spec, cluster, item));
    }
    fail("unreachable");
}

std::string synth_modal_answer(const SynthSpec& spec, int cluster) {
    switch (spec.kind) {
        case TaskKind::classification:
            return kLabelWords[synth_label_index(spec, cluster, 0)];
        case TaskKind::generation: return kStyleWords[cluster % 26];
        case TaskKind::rating: return std::to_string(synth_rating(spec, cluster, 0));
    }
    fail("unreachable");
}

}  // namespace

Population synth_population(const SynthSpec& spec) {
    require(spec.n_clusters >= 1 && spec.users_per_cluster >= 1 && spec.history_len >= 1,
            "synth_population: all counts must be >= 1");
    require(spec.n_clusters <= kNumLabelWords, "synth_population: at most ", kNumLabelWords,
            " clusters supported");

    Population pop;
    TaskSpec task;
    task.task_id = strcat_msg("synth-", to_string(spec.kind));
    task.kind = spec.kind;
    if (spec.kind == TaskKind::classification) {
        for (int l = 0; l < spec.n_clusters; ++l) task.label_set.push_back(kLabelWords[l]);
        std::sort(task.label_set.begin(), task.label_set.end());
    } else if (spec.kind == TaskKind::rating) {
        task.label_set = {"1", "2", "3", "4", "5"};
    }
    task.validate();
    pop.tasks.emplace(task.task_id, task);

    // cluster trait vocabulary: a seed-shuffled assignment of 3 words each
    std::vector<int> trait_perm(kNumTraitWords);
    for (int i = 0; i < kNumTraitWords; ++i) trait_perm[static_cast<size_t>(i)] = i;
    {
        Rng trng(spec.seed ^ 0x7261697473ull);  // independent of user stream
        trng.shuffle(trait_perm);
    }
    auto trait_of = [&](int cluster, int slot) {
        return kTraitWords[trait_perm[static_cast<size_t>((cluster * 3 + slot) % kNumTraitWords)]];
    };

    Rng rng(spec.seed);
    for (int c = 0; c < spec.n_clusters; ++c) {
        for (int uu = 0; uu < spec.users_per_cluster; ++uu) {
            UserRecord u;
            u.user_id = strcat_msg("c", c, "-u", c * spec.users_per_cluster + uu);
            u.task_id = task.task_id;

            for (int h = 0; h < spec.history_len; ++h) {
                // half the traffic hits the cluster-preferred item (item 0)
                int item = rng.uniform() < 0.5
                               ? 0
                               : 1 + static_cast<int>(rng.uniform_int(kNumItems - 1));
                Interaction it;
                it.input = synth_input(spec.kind, item);
                it.output = synth_output(spec, c, item);
                it.seq_index = h;
                u.history.push_back(std::move(it));
            }

            if (spec.profile_mode != SynthSpec::ProfileMode::none) {
                std::string p = "interests:";
                for (int s = 0; s < 3; ++s) {
                    p += " ";
                    p += trait_of(c, s);
                    if (rng.uniform() < 0.10)  // noise tokens
                        p += strcat_msg(" ", kTraitWords[rng.uniform_int(kNumTraitWords)]);
                }
                p += ".";
                if (spec.profile_mode == SynthSpec::ProfileMode::traits)
                    p += strcat_msg(" typically answers ", synth_modal_answer(spec, c), ".");
                u.profile_text = std::move(p);
            }
            pop.users.push_back(std::move(u));
        }
    }
    return pop;
}

int synth_cluster_of_user(std::string_view user_id) {
    if (user_id.size() < 2 || user_id[0] != 'c') return -1;
    int c = 0;
    auto [p, ec] = std::from_chars(user_id.data() + 1, user_id.data() + user_id.size(), c);
    if (ec != std::errc() || p == user_id.data() + 1 || *p != '-') return -1;
    return c;
}

}  // namespace p2p
