#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "icsfuzz/bus.hpp"
#include "icsfuzz/bytes.hpp"
#include "icsfuzz/knowledge.hpp"
#include "icsfuzz/protocol.hpp"
#include "icsfuzz/rng.hpp"

namespace icsfuzz::seedgen {

struct RawCapture {
    int64_t timestamp_us = 0;
    std::string src;  // host:port
    std::string dst;
    uint16_t src_port = 0;
    uint16_t dst_port = 0;
    Bytes payload;
};

struct IngestError {
    enum class Kind { SourceUnavailable, MalformedCaptureFile };
    Kind kind;
    std::string detail;
};

/// Classic-pcap reader (Ethernet/IPv4/TCP). Emits records in file order
/// (timestamp order for well-formed captures), keeping only non-empty TCP
/// payloads addressed to one of the target ports.
Result<std::vector<RawCapture>, IngestError> read_pcap(const std::string& path,
                                                       const std::set<uint16_t>& target_ports);

/// Hex-lines reader: one frame per line, '#' comments allowed. Records are
/// stamped against the given port so the same filter contract applies.
Result<std::vector<RawCapture>, IngestError> read_hex_lines(const std::string& path,
                                                            uint16_t port);

/// Dispatches on the pcap magic, falling back to hex lines.
Result<std::vector<RawCapture>, IngestError> ingest_traffic(const std::string& path,
                                                            const std::set<uint16_t>& target_ports);

// ---------------------------------------------------------------------------

struct Seed {
    std::string seed_id;
    std::string protocol_id;
    std::map<std::string, proto::FieldValue> fields;
    std::string provenance;  // "capture:<ref>" or "synthetic"
    proto::ValidationReport validation;
};

struct QuarantineRecord {
    std::string stage;  // identify | decode | validate | assemble
    std::string reason;
    std::string capture_ref;

    nlohmann::json to_json() const;
};

/// Content hash over the non-ephemeral field map; identical field maps from
/// different captures collapse to one seed.
uint64_t canonical_field_hash(const std::map<std::string, proto::FieldValue>& fields);

/// Staged extraction: (1) identify the protocol by port and magic bytes,
/// (2) structural decode, (3) per-field validation in declaration order with
/// a rule lookup per stage, (4) assembly. The first failing stage short-
/// circuits into a quarantine record naming that stage.
Result<Seed, QuarantineRecord> extract_seed(
    const RawCapture& capture, const std::map<uint16_t, const proto::ProtocolSpec*>& specs_by_port,
    const kb::KnowledgeStore& store, const std::string& capture_ref);

/// Seed wire document: {"event":"seed","data":{...}} with the exact key set.
bus::BusMessage seed_message(const Seed& seed, const std::string& sender);
std::optional<Seed> seed_from_wire(const nlohmann::json& data);

/// Rebuilds a full frame from a seed's field map (ephemeral fields get
/// deterministic defaults, derived lengths are recomputed by the encoder).
proto::Frame frame_from_seed(const Seed& seed, const proto::ProtocolSpec& spec);

/// Builds a valid seed hitting the given (field, value-class) combo, solving
/// count relations as needed. Returns nothing when the combo cannot be
/// reached by a valid frame.
std::optional<Seed> synthesize_combo_seed(const proto::ProtocolSpec& spec,
                                          const std::string& field_name,
                                          const std::string& class_name);

// ---------------------------------------------------------------------------

/// Sequential ingest -> extract -> emit loop over a capture source, with
/// campaign-wide dedup and optional coverage augmentation.
class SeedAgent {
public:
    struct Config {
        std::string agent_id = "seed-0";
        std::set<uint16_t> target_ports;
        bool augment_coverage = false;  // synthesize seeds for uncovered combos
        int64_t heartbeat_interval_ms = 5000;
    };

    SeedAgent(Config config, bus::Bus& bus, const kb::KnowledgeStore& store,
              std::map<uint16_t, const proto::ProtocolSpec*> specs_by_port);

    /// Loads a capture source; returns the record count or an ingest error.
    Result<size_t, IngestError> load_source(const std::string& path);

    /// Processes up to `budget` pending captures (extract + emit). Returns the
    /// number of captures consumed; 0 means the source is drained.
    size_t step(int64_t now_ms, size_t budget = 16);

    bool drained() const { return next_ == pending_.size(); }

    /// Emits synthetic seeds for combos not yet covered by published seeds.
    size_t augment(const proto::ProtocolSpec& spec);

    const std::vector<QuarantineRecord>& quarantined() const { return quarantine_; }
    size_t published_count() const { return published_; }
    const std::vector<Seed>& published_seeds() const { return seeds_; }

private:
    bool emit_seed(const Seed& seed);

    Config config_;
    bus::Bus& bus_;
    const kb::KnowledgeStore& store_;
    std::map<uint16_t, const proto::ProtocolSpec*> specs_;
    bus::HeartbeatPacer pacer_;

    std::vector<RawCapture> pending_;
    size_t next_ = 0;
    std::set<uint64_t> seen_hashes_;
    std::vector<QuarantineRecord> quarantine_;
    std::vector<Seed> seeds_;
    size_t published_ = 0;
    uint64_t synth_counter_ = 0;
};

}  // namespace icsfuzz::seedgen
