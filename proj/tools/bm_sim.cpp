#include "bm/simclient.hpp"

#include <CLI11.hpp>

#include <cstdlib>
#include <fstream>
#include <iostream>

int main(int argc, char** argv) {
  CLI::App app{"Headless Breakable Machine client"};
  bm::sim::SimOptions options;
  std::string scenario_path, out_path;
  long timeout_ms = options.timeout.count();
  app.add_option("--server", options.server, "Server base URL, e.g. http://127.0.0.1:8080")->required();
  app.add_option("--scenario", scenario_path, "Scenario file")->required()->check(CLI::ExistingFile);
  app.add_option("--out", out_path, "Transcript JSON output")->required();
  app.add_option("--credential", options.credential, "Teacher credential (default: $BM_TEACHER_CREDENTIAL)");
  app.add_option("--timeout-ms", timeout_ms, "Per-step reply timeout")->default_val(timeout_ms);
  CLI11_PARSE(app, argc, argv);

  if (options.credential.empty()) {
    if (const char* env = std::getenv("BM_TEACHER_CREDENTIAL")) options.credential = env;
  }
  options.timeout = std::chrono::milliseconds(timeout_ms);

  try {
    const auto transcript = bm::sim::run_scenario(bm::sim::Scenario::load(scenario_path), options);
    std::ofstream(out_path) << transcript.to_json().dump(2) << "\n";
    for (const auto& f : transcript.failures) std::cerr << "FAIL " << f << "\n";
    std::cout << transcript.messages.size() << " messages recorded, " << transcript.failures.size()
              << " failures\n";
    return transcript.ok() ? 0 : 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
