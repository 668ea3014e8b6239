#include "capsteer/manifest.hpp"

#include "capsteer/version.hpp"

namespace capsteer {

Json RunManifest::to_json() const {
  return {{"command", command},
          {"config", config},
          {"seeds", seeds},
          {"inputs", inputs},
          {"outputs", outputs},
          {"fingerprints", fingerprints},
          {"wall_clock_seconds", wall_clock_seconds},
          {"threads", threads},
          {"version", version.empty() ? std::string(kVersion) : version}};
}

void RunManifest::write(const std::string& primary_output) const {
  write_json_file(primary_output + ".manifest.json", to_json());
}

}  // namespace capsteer
