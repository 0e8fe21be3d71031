#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "protostream/episode.hpp"

namespace protostream {

// JSONL episode files: one frame object per line
//   {"t": int, "context": int, "label": int|null, "features": [...], "view2": [...]}
// view2 may be absent; a blank line separates episodes. Floats are written
// with 17 significant digits, so write-then-read reproduces doubles exactly.

void save_episodes(const std::string& path, const std::vector<Episode>& episodes);

// Parses with per-line validation: malformed JSON, unknown keys, missing or
// mistyped fields, and inconsistent dimensions all raise a ValidationError
// naming the line; an unreadable file raises an IoError. Frames without a
// view2 get one synthesized as features + synth_view_sigma * gaussian noise
// (an exact copy when the sigma is 0).
std::vector<Episode> load_episodes(const std::string& path, double synth_view_sigma = 0.0,
                                   std::uint64_t seed = 0);

}  // namespace protostream
