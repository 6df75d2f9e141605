#pragma once

#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <vector>

namespace icsfuzz::kb {

enum class RuleKind {
    CommandFormat,
    FieldConstraint,
    VulnerabilityNote,
    AnomalyRecord,
    StrategyRecord,
};

std::string to_string(RuleKind kind);
std::optional<RuleKind> rule_kind_from(const std::string& s);

struct RuleEntry {
    std::string id;
    std::string protocol_id;
    RuleKind kind = RuleKind::CommandFormat;
    std::string title;
    std::string body;
    std::vector<std::string> keywords;
    std::string source;
};

struct RetrievalResult {
    RuleEntry entry;
    double score = 0.0;
};

class StoreError : public std::runtime_error {
public:
    enum class Kind { Parse, DuplicateId, Io };
    StoreError(Kind kind, const std::string& msg, int line = 0)
        : std::runtime_error(msg), kind_(kind), line_(line) {}
    Kind kind() const { return kind_; }
    int line() const { return line_; }

private:
    Kind kind_;
    int line_;
};

/// Lowercased alphanumeric terms, duplicates removed, order preserved.
std::vector<std::string> tokenize_terms(const std::string& text);

/// Structured store of protocol rules and anomaly/strategy history with
/// deterministic ranked retrieval. Reads are concurrent; appends take the
/// writer lock and are persisted append-only when the store is file-backed.
class KnowledgeStore {
public:
    KnowledgeStore() = default;

    /// Parses a line-delimited record file. Rejects duplicate ids; reports
    /// parse failures with their line number.
    static KnowledgeStore load(const std::string& path);

    size_t size() const;
    const RuleEntry* find(const std::string& id) const;
    std::vector<RuleEntry> entries_snapshot() const;

    /// Top-k entries scoring at least `threshold` of the maximum attainable
    /// score for the query; ranked by score descending, id ascending.
    std::vector<RetrievalResult> retrieve(const std::string& query, size_t k) const;

    /// Score of a single entry for a query in [0, 1]. Exposed so callers and
    /// tests can audit rankings.
    static double score_entry(const RuleEntry& entry, const std::vector<std::string>& terms);

    /// Adds an entry (DuplicateId error if the id exists) and appends it to
    /// the backing file when one is bound.
    void append(const RuleEntry& entry);

    double threshold() const { return threshold_; }
    void set_threshold(double t) { threshold_ = t; }

    /// Character budget applied when retrieved context is injected into
    /// generation prompts.
    size_t context_budget() const { return context_budget_; }
    void set_context_budget(size_t chars) { context_budget_ = chars; }

private:
    std::vector<RuleEntry> entries_;
    std::map<std::string, size_t> by_id_;
    std::string path_;
    double threshold_ = 0.85;
    size_t context_budget_ = 2048;
    mutable std::shared_mutex mutex_;

public:
    KnowledgeStore(const KnowledgeStore& other);
    KnowledgeStore& operator=(const KnowledgeStore& other);
    KnowledgeStore(KnowledgeStore&& other) noexcept;
    KnowledgeStore& operator=(KnowledgeStore&& other) noexcept;
};

}  // namespace icsfuzz::kb
