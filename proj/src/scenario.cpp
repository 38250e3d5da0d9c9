#include "bm/simclient.hpp"

#include <fstream>
#include <sstream>

namespace bm::sim {

namespace {

const std::map<std::string, std::vector<std::string>> kVerbs = {
    {"teacher", {}},
    {"join", {}},
    {"challenge", {"label"}},
    {"submit", {"player", "image"}},
    {"pause", {"value"}},
    {"reveal", {"value"}},
    {"heatmap", {"value"}},
    {"dataset", {"value"}},
    {"regenerate", {}},
    {"wait", {"ms"}},
    {"settle", {}},
    {"converge", {}},
    {"end", {}},
    {"expect_bye", {}},
};

}  // namespace

const std::string& Step::arg(const std::string& key) const {
  auto it = args.find(key);
  if (it == args.end()) {
    throw ScenarioError("line " + std::to_string(line) + ": '" + verb + "' needs " + key + "=");
  }
  return it->second;
}

std::string Step::arg_or(const std::string& key, std::string fallback) const {
  auto it = args.find(key);
  return it == args.end() ? std::move(fallback) : it->second;
}

Scenario Scenario::parse(std::string_view text, std::filesystem::path base_dir) {
  Scenario scenario;
  scenario.base_dir = std::move(base_dir);
  std::istringstream in{std::string(text)};
  std::string raw;
  for (std::size_t number = 1; std::getline(in, raw); ++number) {
    std::istringstream words(raw);
    Step step;
    step.line = number;
    if (!(words >> step.verb) || step.verb.starts_with('#')) continue;
    auto verb = kVerbs.find(step.verb);
    if (verb == kVerbs.end()) {
      throw ScenarioError("line " + std::to_string(number) + ": unknown step '" + step.verb + "'");
    }
    for (std::string token; words >> token;) {
      if (token.starts_with('#')) break;
      const auto eq = token.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw ScenarioError("line " + std::to_string(number) + ": expected key=value, got '" + token + "'");
      }
      step.args[token.substr(0, eq)] = token.substr(eq + 1);
    }
    for (const auto& key : verb->second) step.arg(key);
    scenario.steps.push_back(std::move(step));
  }
  return scenario;
}

Scenario Scenario::load(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw ScenarioError("cannot read scenario " + file.string());
  std::stringstream text;
  text << in.rdbuf();
  return parse(text.str(), file.parent_path());
}

}  // namespace bm::sim
