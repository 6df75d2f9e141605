#include "icsfuzz/knowledge.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <mutex>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

namespace icsfuzz::kb {

using nlohmann::json;

std::string to_string(RuleKind kind) {
    switch (kind) {
        case RuleKind::CommandFormat: return "command-format";
        case RuleKind::FieldConstraint: return "field-constraint";
        case RuleKind::VulnerabilityNote: return "vulnerability-note";
        case RuleKind::AnomalyRecord: return "anomaly-record";
        case RuleKind::StrategyRecord: return "strategy-record";
    }
    return "command-format";
}

std::optional<RuleKind> rule_kind_from(const std::string& s) {
    if (s == "command-format") return RuleKind::CommandFormat;
    if (s == "field-constraint") return RuleKind::FieldConstraint;
    if (s == "vulnerability-note") return RuleKind::VulnerabilityNote;
    if (s == "anomaly-record") return RuleKind::AnomalyRecord;
    if (s == "strategy-record") return RuleKind::StrategyRecord;
    return std::nullopt;
}

std::vector<std::string> tokenize_terms(const std::string& text) {
    std::vector<std::string> out;
    std::set<std::string> seen;
    std::string cur;
    auto flush = [&] {
        if (!cur.empty() && seen.insert(cur).second) out.push_back(cur);
        cur.clear();
    };
    for (char ch : text) {
        if (std::isalnum(static_cast<unsigned char>(ch))) {
            cur.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(ch))));
        } else {
            flush();
        }
    }
    flush();
    return out;
}

namespace {

json entry_to_json(const RuleEntry& e) {
    return json{{"id", e.id},
                {"protocol_id", e.protocol_id},
                {"kind", to_string(e.kind)},
                {"title", e.title},
                {"body", e.body},
                {"keywords", e.keywords},
                {"source", e.source}};
}

RuleEntry entry_from_json(const json& j, int line) {
    RuleEntry e;
    try {
        e.id = j.at("id").get<std::string>();
        e.protocol_id = j.at("protocol_id").get<std::string>();
        auto kind = rule_kind_from(j.at("kind").get<std::string>());
        if (!kind) {
            throw StoreError(StoreError::Kind::Parse,
                             "unknown rule kind in entry " + e.id + " (line " +
                                 std::to_string(line) + ")",
                             line);
        }
        e.kind = *kind;
        e.title = j.at("title").get<std::string>();
        e.body = j.at("body").get<std::string>();
        e.keywords = j.at("keywords").get<std::vector<std::string>>();
        e.source = j.value("source", "");
    } catch (const json::exception& ex) {
        throw StoreError(StoreError::Kind::Parse,
                         "malformed entry at line " + std::to_string(line) + ": " + ex.what(),
                         line);
    }
    if (e.keywords.empty()) {
        throw StoreError(StoreError::Kind::Parse,
                         "entry " + e.id + " has no keywords (line " + std::to_string(line) + ")",
                         line);
    }
    return e;
}

}  // namespace

KnowledgeStore::KnowledgeStore(const KnowledgeStore& other) {
    std::shared_lock lock(other.mutex_);
    entries_ = other.entries_;
    by_id_ = other.by_id_;
    path_ = other.path_;
    threshold_ = other.threshold_;
    context_budget_ = other.context_budget_;
}

KnowledgeStore& KnowledgeStore::operator=(const KnowledgeStore& other) {
    if (this == &other) return *this;
    KnowledgeStore tmp(other);
    *this = std::move(tmp);
    return *this;
}

KnowledgeStore::KnowledgeStore(KnowledgeStore&& other) noexcept {
    entries_ = std::move(other.entries_);
    by_id_ = std::move(other.by_id_);
    path_ = std::move(other.path_);
    threshold_ = other.threshold_;
    context_budget_ = other.context_budget_;
}

KnowledgeStore& KnowledgeStore::operator=(KnowledgeStore&& other) noexcept {
    entries_ = std::move(other.entries_);
    by_id_ = std::move(other.by_id_);
    path_ = std::move(other.path_);
    threshold_ = other.threshold_;
    context_budget_ = other.context_budget_;
    return *this;
}

KnowledgeStore KnowledgeStore::load(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw StoreError(StoreError::Kind::Io, "cannot open knowledge store: " + path);

    KnowledgeStore store;
    store.path_ = path;
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty() || line[0] == '#') continue;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded()) {
            throw StoreError(StoreError::Kind::Parse,
                             "invalid record at line " + std::to_string(line_no), line_no);
        }
        RuleEntry e = entry_from_json(j, line_no);
        if (store.by_id_.count(e.id)) {
            throw StoreError(StoreError::Kind::DuplicateId,
                             "duplicate id '" + e.id + "' at line " + std::to_string(line_no),
                             line_no);
        }
        store.by_id_[e.id] = store.entries_.size();
        store.entries_.push_back(std::move(e));
    }
    return store;
}

size_t KnowledgeStore::size() const {
    std::shared_lock lock(mutex_);
    return entries_.size();
}

const RuleEntry* KnowledgeStore::find(const std::string& id) const {
    std::shared_lock lock(mutex_);
    auto it = by_id_.find(id);
    return it == by_id_.end() ? nullptr : &entries_[it->second];
}

std::vector<RuleEntry> KnowledgeStore::entries_snapshot() const {
    std::shared_lock lock(mutex_);
    return entries_;
}

double KnowledgeStore::score_entry(const RuleEntry& entry, const std::vector<std::string>& terms) {
    if (terms.empty()) return 0.0;
    auto kw = tokenize_terms([&] {
        std::string joined;
        for (const auto& k : entry.keywords) {
            joined += k;
            joined += ' ';
        }
        return joined;
    }());
    auto title = tokenize_terms(entry.title);
    auto body = tokenize_terms(entry.body);
    auto contains = [](const std::vector<std::string>& xs, const std::string& t) {
        return std::find(xs.begin(), xs.end(), t) != xs.end();
    };
    double raw = 0.0;
    for (const auto& t : terms) {
        if (contains(kw, t)) {
            raw += 2.0;
        } else if (contains(title, t)) {
            raw += 1.5;
        } else if (contains(body, t)) {
            raw += 1.0;
        }
    }
    return raw / (2.0 * static_cast<double>(terms.size()));
}

std::vector<RetrievalResult> KnowledgeStore::retrieve(const std::string& query, size_t k) const {
    std::shared_lock lock(mutex_);
    auto terms = tokenize_terms(query);
    std::vector<RetrievalResult> hits;
    for (const auto& e : entries_) {
        double s = score_entry(e, terms);
        if (s >= threshold_ && s > 0.0) hits.push_back({e, s});
    }
    std::sort(hits.begin(), hits.end(), [](const RetrievalResult& a, const RetrievalResult& b) {
        if (a.score != b.score) return a.score > b.score;
        return a.entry.id < b.entry.id;
    });
    if (hits.size() > k) hits.resize(k);
    return hits;
}

void KnowledgeStore::append(const RuleEntry& entry) {
    std::unique_lock lock(mutex_);
    if (by_id_.count(entry.id)) {
        throw StoreError(StoreError::Kind::DuplicateId, "duplicate id '" + entry.id + "'");
    }
    if (entry.keywords.empty()) {
        throw StoreError(StoreError::Kind::Parse, "entry " + entry.id + " has no keywords");
    }
    if (!path_.empty()) {
        std::ofstream out(path_, std::ios::app | std::ios::binary);
        if (!out) throw StoreError(StoreError::Kind::Io, "cannot append to store: " + path_);
        out << entry_to_json(entry).dump() << "\n";
    }
    by_id_[entry.id] = entries_.size();
    entries_.push_back(entry);
}

}  // namespace icsfuzz::kb
