// Regenerates the frozen golden files under tests/golden/ from the recipes.
// Run manually after an intentional change to the model or pipeline:
//   cmake --build build --target update_goldens && ./build/tests/update_goldens

#include <cstdio>
#include <filesystem>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "golden_recipes.hpp"

using namespace kvembed;

namespace {

void write_json(const std::string& path, const Json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error("cannot open for writing: " + path);
  out << j.dump(2) << "\n";
  std::cout << "wrote " << path << "\n";
}

}  // namespace

int main() {
  const std::string dir = KVEMBED_GOLDEN_DIR;
  std::filesystem::create_directories(dir);

  {
    const IDTrajectoryDetail detail = golden::id_golden_detail();
    Json j;
    j["values"] = detail.trajectory.values;
    j["corpus_size"] = detail.trajectory.corpus_size;
    write_json(dir + "/id_trajectory.json", j);
  }

  {
    Json j;
    j["sts_spearman"] = golden::sts_golden_value();
    j["classify_accuracy"] = golden::classify_golden_accuracy();
    write_json(dir + "/eval.json", j);
  }

  {
    const golden::PipelineResult r = golden::run_pipeline();
    write_json(dir + "/pipeline.json", golden::pipeline_to_json(r));
  }

  {
    const ModelConfig cfg = golden::default_model_config();
    const Weights w = random_init(cfg, golden::kModelSeed);
    const std::string tmp =
        (std::filesystem::temp_directory_path() / "kvembed_digest.kvem")
            .string();
    save_weights(tmp, cfg, w);
    std::ostringstream hex;
    hex << std::hex << std::setw(16) << std::setfill('0')
        << golden::model_file_digest(tmp);
    std::ofstream out(dir + "/model_digest.txt", std::ios::trunc);
    out << hex.str() << "\n";
    std::cout << "wrote " << dir << "/model_digest.txt (" << hex.str()
              << ")\n";
    std::remove(tmp.c_str());
  }

  std::cout << "goldens updated\n";
  return 0;
}
