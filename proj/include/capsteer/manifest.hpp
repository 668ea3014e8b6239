#pragma once

// Run manifest: enough recorded state to bit-reproduce a command
// single-threaded. Written next to each command's primary output as
// <output>.manifest.json. Wall-clock is informational and is the one
// field expected to differ between otherwise identical runs.

#include <string>
#include <vector>

#include "capsteer/jsonl.hpp"

namespace capsteer {

struct RunManifest {
  std::string command;
  Json config;  // full effective configuration after flag resolution
  Json seeds;   // named seeds, e.g. {"corpus": 7}
  std::vector<std::string> inputs;
  std::vector<std::string> outputs;
  Json fingerprints;  // checkpoint name -> hex fingerprint
  double wall_clock_seconds = 0.0;
  int threads = 1;
  std::string version;

  Json to_json() const;

  // Writes <primary_output>.manifest.json.
  void write(const std::string& primary_output) const;
};

}  // namespace capsteer
