#pragma once

#include <spdlog/spdlog.h>

namespace imo {

/// Routes spdlog's default logger to stderr at the level named by
/// IMO_LOG_LEVEL (error|warn|info|debug; default warn). Idempotent.
void configure_logging();

}  // namespace imo
