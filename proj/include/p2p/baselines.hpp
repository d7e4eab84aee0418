#pragma once

// Comparator methods: prompt-side input transforms (retrieval-augmented,
// summary-augmented, full-history) and adapter-side trainers (one shared
// task adapter; one adapter per user trained on that user's own history).

#include <span>
#include <string>

#include "p2p/base_lm.hpp"
#include "p2p/corpus.hpp"
#include "p2p/lora.hpp"

namespace p2p {

enum class BaselineKind { base, rag, pag, full_history, mt_lora, oppu, p2p };

std::string to_string(BaselineKind kind);
BaselineKind baseline_from_string(std::string_view s);

// [retrieved items || x]; retrieval over the user's pre-split history,
// lowest-scored items dropped first when the token budget overflows; x is
// never truncated here
std::string rag_input(const std::string& x, const UserRecord& user, int k, const Vocab& vocab,
                      int max_tokens);

// [summary || retrieved items || x]; items dropped first, then the summary
std::string pag_input(const std::string& x, const UserRecord& user, const TaskSpec& task,
                      int k, const Vocab& vocab, int max_tokens);

// [flattened history || x], oldest to newest; the oldest lines drop first
std::string full_history_input(const std::string& x, const UserRecord& user,
                               const Vocab& vocab, int max_tokens);

struct MtLoraConfig {
    int rank = kDefaultLoraRank;
    double alpha = kDefaultLoraAlpha;
    double lr = 1e-3;
    int steps = 400;
    int batch = 16;
    uint64_t seed = 0;
    double grad_clip = 1.0;
};

// one shared adapter trained on all training pairs, no personalization signal
AdapterSet mtlora_train(const BaseLm& lm, const Vocab& vocab, const Population& pop,
                        std::span<const int> train_users, const MtLoraConfig& cfg);

struct OppuConfig {
    int rank = kDefaultLoraRank;
    double alpha = kDefaultLoraAlpha;
    double lr = 1e-3;
    int epochs = 3;
    uint64_t seed = 0;
    double grad_clip = 1.0;
};

// fresh per-user adapter optimized on the user's pre-split history only
AdapterSet oppu_train(const BaseLm& lm, const Vocab& vocab, const UserRecord& user,
                      const OppuConfig& cfg);

}  // namespace p2p
