#include "icsfuzz/mutation_agent.hpp"

#include <algorithm>
#include <cmath>

#include <httplib.h>

namespace icsfuzz::mutation {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Strategy
// ---------------------------------------------------------------------------

json MutationStrategy::wire_data() const {
    return json{{"rho", rho},
                {"field_priorities", field_priorities},
                {"direction_weights", direction_weights},
                {"feedback_score", feedback_score}};
}

void MutationStrategy::apply_wire(const json& data) {
    rho = data.value("rho", rho);
    feedback_score = data.value("feedback_score", feedback_score);
    if (data.contains("field_priorities")) {
        field_priorities = data.at("field_priorities").get<std::map<std::string, double>>();
    }
    if (data.contains("direction_weights")) {
        direction_weights = data.at("direction_weights").get<std::map<std::string, double>>();
    }
}

MutationStrategy update_density(MutationStrategy strategy, double feedback_score) {
    strategy.feedback_score = feedback_score;
    strategy.rho = std::clamp(strategy.rho0 * (1.0 + strategy.alpha * feedback_score),
                              strategy.rho_min, 1.0);
    return strategy;
}

MutationStrategy strategy_for_spec(const proto::ProtocolSpec& spec, MutationStrategy base) {
    for (const auto& f : spec.fields) {
        double w = 1.0;
        if (auto it = spec.priorities.find(f.name); it != spec.priorities.end()) w = it->second;
        base.field_priorities.emplace(f.name, w);
    }
    return base;
}

// ---------------------------------------------------------------------------
// Records and wire format
// ---------------------------------------------------------------------------

json MutationRecord::to_json() const {
    json j{{"kind", kind}};
    if (kind == "field") {
        j["field"] = field;
        j["v"] = original;
        j["dv"] = delta;
        j["v_prime"] = mutated;
        j["width"] = width;
    } else if (kind == "structural") {
        json ins = json::array();
        for (const auto& [splice, blob] : inserted) {
            ins.push_back(json{{"at", splice}, {"hex", to_hex(blob)}});
        }
        j["inserted"] = ins;
        j["deleted"] = deleted;
    } else {
        j["relation"] = relation;
        j["description"] = description;
    }
    return j;
}

bus::BusMessage TestCase::wire_message(const std::string& sender) const {
    json muts = json::array();
    for (const auto& m : mutations) muts.push_back(m.to_json());
    bus::BusMessage msg;
    msg.topic = "test_case";
    msg.event = "test_case";
    msg.sender = sender;
    msg.data = json{{"case_id", case_id},
                    {"seed_id", seed_id},
                    {"protocol_id", protocol_id},
                    {"mutations", muts},
                    {"hex", to_hex(bytes)}};
    return msg;
}

// ---------------------------------------------------------------------------
// Field mutation (Eq. 3 shape: V' = (V + dV) mod 2^width)
// ---------------------------------------------------------------------------

namespace {

uint64_t mask_for(uint32_t bits) { return bits >= 64 ? ~0ULL : ((1ULL << bits) - 1); }

// Delta mixture: boundary values first, then small steps, then uniform noise.
// The blend keeps mutated-value entropy in a useful band instead of spraying
// uniform randomness across the whole width.
constexpr double kBoundaryShare = 0.50;
constexpr double kSmallDeltaShare = 0.30;

uint64_t draw_delta(uint64_t value, uint32_t width, RngStream& rng) {
    uint64_t mask = mask_for(width);
    double roll = rng.unit();
    uint64_t target;
    if (roll < kBoundaryShare) {
        static constexpr int kBoundaryCount = 4;
        switch (rng.below(kBoundaryCount)) {
            case 0: target = 0; break;
            case 1: target = 1; break;
            case 2: target = mask; break;
            default: target = mask - 1; break;
        }
    } else if (roll < kBoundaryShare + kSmallDeltaShare) {
        uint64_t step = rng.between(1, 16);
        target = rng.unit() < 0.5 ? (value + step) & mask : (value - step) & mask;
    } else {
        target = rng.next() & mask;
    }
    uint64_t delta = (target - value) & mask;
    return delta == 0 ? 1 : delta;
}

struct WeightedPick {
    std::vector<const proto::FieldDescriptor*> fields;
    std::vector<double> weights;
};

WeightedPick mutable_int_fields(const proto::Frame& frame, const proto::ProtocolSpec& spec,
                                const MutationStrategy& strategy) {
    WeightedPick out;
    const proto::VariantLayout* variant = nullptr;
    if (!spec.discriminator.empty() && frame.has(spec.discriminator)) {
        variant = spec.variant_for(frame.int_value(spec.discriminator));
    }
    for (const auto* fd : spec.layout(variant)) {
        if (fd->is_bytes() || !frame.has(fd->name)) continue;
        double w = 1.0;
        if (auto it = strategy.field_priorities.find(fd->name);
            it != strategy.field_priorities.end()) {
            w = it->second;
        }
        if (w <= 0.0) continue;
        out.fields.push_back(fd);
        out.weights.push_back(w);
    }
    return out;
}

size_t weighted_draw(const std::vector<double>& weights, RngStream& rng) {
    double total = 0;
    for (double w : weights) total += w;
    double roll = rng.unit() * total;
    double acc = 0;
    for (size_t i = 0; i < weights.size(); ++i) {
        acc += weights[i];
        if (roll < acc) return i;
    }
    return weights.size() - 1;
}

TestCase finish_case(const seedgen::Seed& seed, const proto::ProtocolSpec& spec,
                     const MutationStrategy& strategy, proto::Frame& frame,
                     std::vector<MutationRecord> mutations) {
    TestCase tc;
    tc.seed_id = seed.seed_id;
    tc.protocol_id = seed.protocol_id;
    tc.mutations = std::move(mutations);
    tc.strategy_snapshot = strategy;
    tc.bytes = proto::encode_frame_fuzz(frame, spec);
    return tc;
}

}  // namespace

Result<TestCase, MutateError> mutate_field(const seedgen::Seed& seed,
                                           const proto::ProtocolSpec& spec,
                                           const MutationStrategy& strategy, RngStream& rng) {
    proto::Frame frame = seedgen::frame_from_seed(seed, spec);
    auto pick = mutable_int_fields(frame, spec, strategy);
    if (pick.fields.empty()) {
        return MutateError{MutateError::Kind::NoMutableFields, "seed has no mutable fields"};
    }

    size_t k = static_cast<size_t>(
        std::ceil(strategy.rho * static_cast<double>(pick.fields.size())));
    k = std::clamp<size_t>(k, 1, pick.fields.size());

    std::vector<MutationRecord> records;
    for (size_t n = 0; n < k; ++n) {
        size_t idx = weighted_draw(pick.weights, rng);
        const auto* fd = pick.fields[idx];
        pick.fields.erase(pick.fields.begin() + idx);
        pick.weights.erase(pick.weights.begin() + idx);

        uint64_t mask = mask_for(fd->width_bits);
        uint64_t value = frame.int_value(fd->name) & mask;
        uint64_t delta = draw_delta(value, fd->width_bits, rng);
        uint64_t mutated = (value + delta) & mask;

        frame.values[fd->name] = mutated;
        if (fd->is_length()) frame.pinned.insert(fd->name);  // survive encoding

        MutationRecord rec;
        rec.kind = "field";
        rec.field = fd->name;
        rec.original = value;
        rec.delta = delta;
        rec.mutated = mutated;
        rec.width = fd->width_bits;
        records.push_back(std::move(rec));
    }
    return finish_case(seed, spec, strategy, frame, std::move(records));
}

// ---------------------------------------------------------------------------
// Structural mutation (Eq. 4 shape: P' = (P u F_insert) \ F_delete)
// ---------------------------------------------------------------------------

Result<TestCase, MutateError> mutate_structure(const seedgen::Seed& seed,
                                               const proto::ProtocolSpec& spec,
                                               const MutationStrategy& strategy, RngStream& rng) {
    proto::Frame frame = seedgen::frame_from_seed(seed, spec);
    proto::FuzzEncodeReport layout;
    Bytes bytes = proto::encode_frame_fuzz(frame, spec, &layout);

    // Splice points available for this frame + deletable field extents.
    struct Splice {
        std::string name;
        size_t offset;
    };
    std::vector<Splice> splices;
    for (const auto& sp : spec.splices) {
        if (sp.at_end) {
            splices.push_back({sp.name, bytes.size()});
            continue;
        }
        for (const auto& [name, extent] : layout.extents) {
            if (name == sp.after_field) {
                splices.push_back({sp.name, extent.first + extent.second});
            }
        }
    }
    std::vector<std::pair<std::string, std::pair<size_t, size_t>>> deletable;
    for (const auto& [name, extent] : layout.extents) {
        if (name != proto::kUnparsedField && extent.second > 0) deletable.push_back({name, extent});
    }
    if (splices.empty() && deletable.empty()) {
        return MutateError{MutateError::Kind::NoMutableStructure,
                           "spec declares no splice points and no deletable fields"};
    }

    MutationRecord rec;
    rec.kind = "structural";

    bool do_insert = !splices.empty() && (deletable.empty() || rng.unit() < 0.6);
    bool do_delete = !deletable.empty() && (!do_insert || rng.unit() < 0.35);
    if (!do_insert && !do_delete) do_insert = !splices.empty();
    if (!do_insert && !do_delete) do_delete = true;

    // Edits collected first, then applied back-to-front so offsets stay valid.
    struct Edit {
        size_t offset;
        size_t erase_len;
        Bytes insert;
    };
    std::vector<Edit> edits;

    if (do_delete) {
        size_t idx = rng.below(deletable.size());
        const auto& [name, extent] = deletable[idx];
        rec.deleted.push_back(name);
        edits.push_back({extent.first, extent.second, {}});
    }
    if (do_insert) {
        const Splice& sp = splices[rng.below(splices.size())];
        Bytes blob(rng.between(1, 16));
        for (auto& b : blob) b = static_cast<uint8_t>(rng.below(256));
        rec.inserted.push_back({sp.name, blob});
        edits.push_back({sp.offset, 0, std::move(blob)});
    }

    std::sort(edits.begin(), edits.end(),
              [](const Edit& a, const Edit& b) { return a.offset > b.offset; });
    for (const auto& e : edits) {
        bytes.erase(bytes.begin() + e.offset, bytes.begin() + e.offset + e.erase_len);
        bytes.insert(bytes.begin() + e.offset, e.insert.begin(), e.insert.end());
    }

    TestCase tc;
    tc.seed_id = seed.seed_id;
    tc.protocol_id = seed.protocol_id;
    tc.mutations = {std::move(rec)};
    tc.strategy_snapshot = strategy;
    tc.bytes = std::move(bytes);  // length fields deliberately left stale
    return tc;
}

// ---------------------------------------------------------------------------
// Semantic mutation (Eq. 5 shape: S' = f(S, dS), dS != empty)
// ---------------------------------------------------------------------------

namespace {

struct SemanticRelation {
    enum class Kind { LengthField, CountRelation, EchoField } kind;
    const proto::FieldDescriptor* field = nullptr;     // length or echo field
    const proto::CountConstraint* constraint = nullptr;  // count relation
};

std::vector<SemanticRelation> semantic_relations(const proto::Frame& frame,
                                                 const proto::ProtocolSpec& spec) {
    std::vector<SemanticRelation> out;
    const proto::VariantLayout* variant = nullptr;
    if (!spec.discriminator.empty() && frame.has(spec.discriminator)) {
        variant = spec.variant_for(frame.int_value(spec.discriminator));
    }
    for (const auto* fd : spec.layout(variant)) {
        if (fd->is_length()) {
            out.push_back({SemanticRelation::Kind::LengthField, fd, nullptr});
        } else if (fd->echo && frame.has(fd->name) &&
                   fd->domain == proto::DomainKind::EnumValues) {
            out.push_back({SemanticRelation::Kind::EchoField, fd, nullptr});
        }
    }
    for (const auto& c : spec.constraints) {
        if (variant && c.variant == variant->name && frame.has(c.rhs)) {
            out.push_back({SemanticRelation::Kind::CountRelation, nullptr, &c});
        }
    }
    return out;
}

}  // namespace

Result<TestCase, MutateError> mutate_semantic(const seedgen::Seed& seed,
                                              const proto::ProtocolSpec& spec,
                                              const MutationStrategy& strategy, RngStream& rng) {
    proto::Frame frame = seedgen::frame_from_seed(seed, spec);
    auto relations = semantic_relations(frame, spec);
    if (relations.empty()) {
        return MutateError{MutateError::Kind::NoSemanticRelations,
                           "spec declares no semantic relations for this frame"};
    }

    const auto& rel = relations[rng.below(relations.size())];
    MutationRecord rec;
    rec.kind = "semantic";

    switch (rel.kind) {
        case SemanticRelation::Kind::LengthField: {
            // Anomaly: declared length disagrees with the payload. Encode once
            // to learn the true value, then pin a skewed one.
            auto encoded = proto::encode_frame(frame, spec);
            if (!encoded.ok()) {
                return MutateError{MutateError::Kind::NoSemanticRelations,
                                   "seed frame does not encode: " + encoded.error().detail};
            }
            auto decoded = proto::decode_frame(encoded.value(), spec);
            uint64_t actual = decoded.value().int_value(rel.field->name);
            static constexpr int64_t kSkews[] = {-3, -2, -1, 1, 2, 3, 4};
            int64_t skew = kSkews[rng.below(7)];
            int64_t declared = static_cast<int64_t>(actual) + skew;
            if (declared < 0) declared = static_cast<int64_t>(actual) + 1;
            frame.values[rel.field->name] = static_cast<uint64_t>(declared);
            frame.pinned.insert(rel.field->name);
            rec.relation = rel.field->name;
            rec.description = "declared " + std::to_string(declared) + " vs actual " +
                              std::to_string(actual);
            break;
        }
        case SemanticRelation::Kind::CountRelation: {
            const auto& c = *rel.constraint;
            const auto* rhs = spec.find_field(c.rhs);
            uint64_t value = frame.int_value(c.rhs);
            uint64_t skew = rng.between(1, 4);
            uint64_t mutated = value + skew <= rhs->range_hi ? value + skew
                               : value >= rhs->range_lo + skew ? value - skew
                                                               : value + 1;
            if (mutated == value) mutated = value > rhs->range_lo ? value - 1 : value + 1;
            frame.values[c.rhs] = mutated;
            rec.relation = c.lhs;  // violations land in the lhs relation group
            rec.description = c.name + ": count " + std::to_string(value) + " -> " +
                              std::to_string(mutated) + " against unchanged data";
            break;
        }
        case SemanticRelation::Kind::EchoField: {
            uint64_t mask = mask_for(rel.field->width_bits);
            uint64_t v = rng.next() & mask;
            auto is_legal = [&](uint64_t x) {
                return std::find(rel.field->enum_values.begin(), rel.field->enum_values.end(),
                                 x) != rel.field->enum_values.end();
            };
            while (is_legal(v)) v = (v + 1) & mask;
            rec.relation = rel.field->name;
            rec.description = "echo-convention value " + std::to_string(v) +
                              " outside the accepted set";
            frame.values[rel.field->name] = v;
            break;
        }
    }

    return finish_case(seed, spec, strategy, frame, {std::move(rec)});
}

// ---------------------------------------------------------------------------
// Prompting
// ---------------------------------------------------------------------------

Prompt build_prompt(const seedgen::Seed& seed, const proto::ProtocolSpec& spec,
                    const std::string& context, const std::string& task,
                    size_t context_budget) {
    Prompt out;
    std::string ctx = context;
    if (ctx.size() > context_budget) {
        const std::string marker = "\n...[context truncated]";
        size_t keep = context_budget > marker.size() ? context_budget - marker.size() : 0;
        ctx = ctx.substr(0, keep) + marker;
        out.context_truncated = true;
    }

    json fields = json::object();
    for (const auto& [name, value] : seed.fields) {
        if (std::holds_alternative<uint64_t>(value)) {
            fields[name] = std::get<uint64_t>(value);
        } else {
            fields[name] = to_hex(std::get<Bytes>(value));
        }
    }

    out.text = "Context:\n" + ctx + "\n";
    out.text += "Task:\n";
    out.text += "- Step 1: Perform field mutations.\n";
    out.text += "- Step 2: Perform structural mutations.\n";
    out.text += "- Step 3: Perform semantic mutations.\n";
    if (!task.empty()) out.text += "Focus: " + task + "\n";
    out.text += "Input seed: " + fields.dump() + "\n";
    proto::Frame frame = seedgen::frame_from_seed(seed, spec);
    auto encoded = proto::encode_frame(frame, spec);
    if (encoded.ok()) out.text += "Seed hex: " + to_hex(encoded.value()) + "\n";
    out.text +=
        "Reply with one JSON object per line: {\"hex\":\"<mutated frame bytes, lowercase "
        "hex>\"}\n";
    return out;
}

// ---------------------------------------------------------------------------
// Backends
// ---------------------------------------------------------------------------

Result<std::vector<TestCase>, MutateError> DeterministicBackend::generate_cases(
    const seedgen::Seed& seed, const proto::ProtocolSpec& spec, const MutationStrategy& strategy,
    size_t n, RngStream& rng) {
    std::vector<std::string> kinds;
    std::vector<double> weights;
    for (const auto& [kind, w] : strategy.direction_weights) {
        if (w > 0) {
            kinds.push_back(kind);
            weights.push_back(w);
        }
    }
    if (kinds.empty()) {
        return MutateError{MutateError::Kind::NoOperators, "all direction weights are zero"};
    }

    std::vector<TestCase> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        const std::string& kind = kinds[weighted_draw(weights, rng)];
        auto attempt = [&](const std::string& k) -> Result<TestCase, MutateError> {
            if (k == "structural") return mutate_structure(seed, spec, strategy, rng);
            if (k == "semantic") return mutate_semantic(seed, spec, strategy, rng);
            return mutate_field(seed, spec, strategy, rng);
        };
        auto result = attempt(kind);
        if (!result.ok()) result = attempt("field");
        if (!result.ok()) result = attempt("structural");
        if (!result.ok()) return result.error();
        out.push_back(std::move(result.value()));
    }
    return out;
}

Result<std::vector<TestCase>, std::string> DeterministicBackend::generate(
    const seedgen::Seed& seed, const proto::ProtocolSpec& spec, const MutationStrategy& strategy,
    size_t n, RngStream& rng) {
    auto result = generate_cases(seed, spec, strategy, n, rng);
    if (!result.ok()) return result.error().message;
    return std::move(result.value());
}

RemoteBackend::RemoteBackend(Config config, const kb::KnowledgeStore* store)
    : config_(std::move(config)), store_(store) {}

Result<std::vector<TestCase>, std::string> RemoteBackend::generate(
    const seedgen::Seed& seed, const proto::ProtocolSpec& spec, const MutationStrategy& strategy,
    size_t n, RngStream&) {
    std::string context;
    size_t budget = config_.context_budget;
    if (store_) {
        budget = std::min(budget, store_->context_budget());
        auto hits = store_->retrieve("Protocol rules " + seed.protocol_id, 1);
        if (!hits.empty()) {
            context = hits.front().entry.title + "\n" + hits.front().entry.body;
        }
    }
    Prompt prompt = build_prompt(seed, spec, context, "", budget);

    httplib::Client client(config_.host, config_.port);
    client.set_connection_timeout(0, config_.timeout_ms * 1000);
    client.set_read_timeout(0, config_.timeout_ms * 1000);

    json request{{"prompt", prompt.text},
                 {"temperature", config_.temperature},
                 {"top_k", config_.top_k},
                 {"top_p", config_.top_p},
                 {"max_tokens", config_.max_tokens}};

    httplib::Result response;
    for (int attempt = 0; attempt <= config_.retries; ++attempt) {
        response = client.Post(config_.path, request.dump(), "application/json");
        if (response && response->status == 200) break;
    }
    if (!response || response->status != 200) {
        return std::string("remote backend unreachable");
    }

    json body = json::parse(response->body, nullptr, false);
    if (body.is_discarded() || !body.contains("text")) {
        return std::string("remote backend returned an unparseable body");
    }

    // One JSON object per line, each with a hex frame. Everything undecodable
    // is dropped and counted; the output is never injected unvalidated.
    std::vector<TestCase> out;
    std::istringstream lines(body.at("text").get<std::string>());
    std::string line;
    proto::Frame seed_frame = seedgen::frame_from_seed(seed, spec);
    while (out.size() < n && std::getline(lines, line)) {
        json j = json::parse(line, nullptr, false);
        if (j.is_discarded() || !j.contains("hex")) continue;
        auto bytes = from_hex(j.at("hex").get<std::string>());
        if (!bytes || bytes->empty()) {
            ++dropped_invalid_;
            continue;
        }
        auto decoded = proto::decode_frame(*bytes, spec);
        if (!decoded.ok()) {
            ++dropped_invalid_;
            continue;
        }

        // Reconstruct mutation lineage by diffing against the seed frame.
        TestCase tc;
        tc.seed_id = seed.seed_id;
        tc.protocol_id = seed.protocol_id;
        tc.bytes = std::move(*bytes);
        tc.strategy_snapshot = strategy;
        for (const auto& [name, value] : decoded.value().values) {
            if (name == proto::kUnparsedField) continue;
            auto it = seed_frame.values.find(name);
            if (it == seed_frame.values.end() || !std::holds_alternative<uint64_t>(value) ||
                !std::holds_alternative<uint64_t>(it->second)) {
                continue;
            }
            uint64_t before = std::get<uint64_t>(it->second);
            uint64_t after = std::get<uint64_t>(value);
            if (before == after) continue;
            const auto* fd = spec.find_field(name);
            MutationRecord rec;
            rec.kind = "field";
            rec.field = name;
            rec.original = before;
            rec.mutated = after;
            rec.width = fd ? fd->width_bits : 64;
            rec.delta = (after - before) & mask_for(rec.width);
            tc.mutations.push_back(std::move(rec));
        }
        if (tc.mutations.empty()) {
            MutationRecord rec;
            rec.kind = "semantic";
            rec.relation = "remote";
            rec.description = "remote-generated case equal to or restructuring the seed";
            tc.mutations.push_back(std::move(rec));
        }
        out.push_back(std::move(tc));
    }
    if (out.empty()) return std::string("remote backend produced no decodable cases");
    return out;
}

Result<std::vector<TestCase>, std::string> RandomBytesBackend::generate(
    const seedgen::Seed& seed, const proto::ProtocolSpec& spec, const MutationStrategy& strategy,
    size_t n, RngStream& rng) {
    (void)spec;
    std::vector<TestCase> out;
    out.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        Bytes blob(rng.between(8, 64));
        for (auto& b : blob) b = static_cast<uint8_t>(rng.below(256));
        TestCase tc;
        tc.seed_id = seed.seed_id;
        tc.protocol_id = seed.protocol_id;
        MutationRecord rec;
        rec.kind = "structural";
        rec.inserted.push_back({"frame", blob});
        for (const auto& [name, value] : seed.fields) rec.deleted.push_back(name);
        tc.mutations = {std::move(rec)};
        tc.strategy_snapshot = strategy;
        tc.bytes = std::move(blob);
        out.push_back(std::move(tc));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Agent
// ---------------------------------------------------------------------------

MutationAgent::MutationAgent(Config config, bus::Bus& bus,
                             std::map<std::string, const proto::ProtocolSpec*> specs_by_protocol,
                             std::shared_ptr<GenerationBackend> backend, MutationStrategy initial,
                             RngStream rng)
    : config_(std::move(config)),
      bus_(bus),
      specs_(std::move(specs_by_protocol)),
      backend_(std::move(backend)),
      strategy_(std::move(initial)),
      rng_(std::move(rng)),
      pacer_(config_.agent_id, config_.heartbeat_interval_ms) {
    seed_sub_ = bus_.subscribe("seed", config_.agent_id);
    strategy_sub_ = bus_.subscribe("strategy", config_.agent_id);
    control_sub_ = bus_.subscribe("control", config_.agent_id);
}

void MutationAgent::drain_inputs() {
    while (auto msg = seed_sub_->poll()) {
        if (auto seed = seedgen::seed_from_wire(msg->data)) {
            corpus_.emplace(seed->seed_id, std::move(*seed));
        }
    }
    while (auto msg = strategy_sub_->poll()) {
        strategy_.apply_wire(msg->data);  // applied between batches only
    }
    while (auto msg = control_sub_->poll()) {
        if (msg->event == "assign_task" &&
            msg->data.value("agent_id", "") == config_.agent_id) {
            tasks_.push_back(Task{msg->data.value("task_id", ""),
                                  msg->data.value("seed_id", ""),
                                  msg->data.value("cases", size_t{0})});
        }
    }
}

size_t MutationAgent::step(int64_t now_ms) {
    pacer_.maybe_beat(bus_, now_ms);
    drain_inputs();
    if (tasks_.empty()) return 0;

    Task task = tasks_.front();
    tasks_.erase(tasks_.begin());

    auto seed_it = corpus_.find(task.seed_id);
    if (seed_it == corpus_.end()) {
        bus::BusMessage fail;
        fail.topic = "control";
        fail.event = "task_failed";
        fail.sender = config_.agent_id;
        fail.data = json{{"task_id", task.task_id},
                         {"agent_id", config_.agent_id},
                         {"reason", "unknown seed " + task.seed_id}};
        bus_.publish(fail);
        return 0;
    }
    const seedgen::Seed& seed = seed_it->second;
    auto spec_it = specs_.find(seed.protocol_id);
    if (spec_it == specs_.end()) return 0;
    const proto::ProtocolSpec& spec = *spec_it->second;

    auto batch = backend_->generate(seed, spec, strategy_, task.cases, rng_);
    bool fell_back = false;
    if (!batch.ok() && backend_->name() != "deterministic") {
        // Remote trouble must not stall the campaign: the in-tree engine
        // stands in and every case is flagged.
        batch = deterministic_.generate(seed, spec, strategy_, task.cases, rng_);
        fell_back = true;
    }
    if (!batch.ok()) return 0;

    if (fell_back) {
        ++fallback_batches_;
        bus::BusMessage note;
        note.topic = "control";
        note.event = "backend_fallback";
        note.sender = config_.agent_id;
        note.data = json{{"agent_id", config_.agent_id}, {"task_id", task.task_id}};
        bus_.publish(note);
    }

    size_t published = 0;
    for (auto& tc : batch.value()) {
        tc.case_id = config_.agent_id + "-c" + std::to_string(case_counter_++);
        tc.fallback = fell_back;
        bus_.publish(tc.wire_message(config_.agent_id));
        ++published;
    }

    bus::BusMessage done;
    done.topic = "control";
    done.event = "task_done";
    done.sender = config_.agent_id;
    done.data = json{{"task_id", task.task_id},
                     {"agent_id", config_.agent_id},
                     {"cases", published}};
    bus_.publish(done);
    return published;
}

}  // namespace icsfuzz::mutation
