#pragma once
// Trace archives: captured activations of one evaluation run in the shared
// tensor container (magic "QLTR1"), usable by diagnostics without a model.

#include <string>
#include <vector>

#include "json.hpp"
#include "quantlens/causal.hpp"
#include "quantlens/model.hpp"

namespace qlens {

inline constexpr std::string_view kTraceMagic = "QLTR1";

struct TraceStore {
  std::vector<PromptKey> keys;
  std::vector<ForwardTrace> traces;
  nlohmann::json meta = nlohmann::json::object();  // run identity (model digest, bits, ...)
};

// Writes the sites selected in `sites` (residual, attn_out, ffn_out,
// gate_preact, h_key, attention); other flags are ignored.
void export_traces(const std::string& path, const TraceStore& store, const CaptureFlags& sites);
TraceStore import_traces(const std::string& path);  // CorruptArchive on structural damage

// Throws AlignmentError unless both stores hold the same prompts in the same order.
void check_aligned(const TraceStore& a, const TraceStore& b);

}  // namespace qlens
