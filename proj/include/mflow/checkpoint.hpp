#pragma once

#include <string>

#include "mflow/flow.hpp"

namespace mflow {

// Model files are a single line of JSON metadata followed by the parameters
// as little-endian 64-bit floats, in flatten() order.  A digest over the
// whole file is stored in the header, so any corruption (header or payload)
// fails the load with CheckpointError.  Round trips are bit exact.

void save_field_checkpoint(const std::string& path, const FieldParams& params);
FieldParams load_field_checkpoint(const std::string& path);

// flow checkpoints additionally carry the base density, time grid and chart
// policy; a loaded model evaluates identically to the saved one
void save_flow_checkpoint(const std::string& path, const FlowModel& model);
FlowModel load_flow_checkpoint(const std::string& path);

// JSON text codec for density specifications (embedded in checkpoints,
// reused by config files)
std::string density_spec_to_json(const DensitySpec& spec);
DensitySpec density_spec_from_json(const std::string& text);

}  // namespace mflow
