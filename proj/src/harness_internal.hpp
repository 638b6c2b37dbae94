#pragma once

#include "dgkd/harness.hpp"

namespace dgkd::harness::detail {

void write_ablation_report(const fs::path& root, const AblationPlan& plan, const AblationResult& res);

} // namespace dgkd::harness::detail
