#pragma once

#include <filesystem>
#include <string>

#include "odeguide/datagen.hpp"

namespace odeguide {

/// Shortest decimal text that parses back to the same double.
std::string format_double(double v);
double parse_double(const std::string& text);

/// Writes factual.csv, counterfactual.csv and manifest.json into dir.
void write_dataset(const Dataset& dataset, const std::filesystem::path& dir);
Dataset read_dataset(const std::filesystem::path& dir);

nlohmann::ordered_json schedule_to_json(const TreatmentSchedule& s);
TreatmentSchedule schedule_from_json(const nlohmann::ordered_json& j);

}  // namespace odeguide
