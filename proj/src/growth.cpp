#include "lindit/growth.hpp"

namespace lindit {

std::string to_string(GrowthKind kind) {
  switch (kind) {
    case GrowthKind::PartialPreservation:
      return "partial";
    case GrowthKind::CyclicReplication:
      return "cyclic";
    case GrowthKind::BlockReplication:
      return "block";
  }
  return "unknown";
}

GrowthKind parse_growth_kind(const std::string& name) {
  if (name == "partial") return GrowthKind::PartialPreservation;
  if (name == "cyclic") return GrowthKind::CyclicReplication;
  if (name == "block") return GrowthKind::BlockReplication;
  throw ConfigError("unknown growth strategy '" + name + "' (expected partial, cyclic or block)");
}

}  // namespace lindit
