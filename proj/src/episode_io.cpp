#include "protostream/episode_io.hpp"

#include <cstdio>
#include <fstream>
#include <json.hpp>
#include <sstream>

#include "protostream/errors.hpp"
#include "protostream/rng.hpp"

namespace protostream {

namespace {

using nlohmann::json;

void append_number(std::string& out, double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  out += buf;
}

void append_vector(std::string& out, const Eigen::VectorXd& v) {
  out += '[';
  for (Eigen::Index i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    append_number(out, v[i]);
  }
  out += ']';
}

[[noreturn]] void fail_line(std::size_t line, const std::string& why) {
  throw ValidationError("episode file line " + std::to_string(line) + ": " + why);
}

Eigen::VectorXd parse_vector(const json& j, std::size_t line, const char* key) {
  if (!j.is_array() || j.empty()) fail_line(line, std::string(key) + " must be a non-empty array");
  Eigen::VectorXd v(static_cast<Eigen::Index>(j.size()));
  Eigen::Index at = 0;
  for (const auto& x : j) {
    if (!x.is_number()) fail_line(line, std::string(key) + " must contain only numbers");
    v[at++] = x.get<double>();
  }
  return v;
}

}  // namespace

void save_episodes(const std::string& path, const std::vector<Episode>& episodes) {
  std::FILE* f = std::fopen(path.c_str(), "w");
  if (!f) throw IoError("cannot open episode file for writing: " + path);
  std::string line;
  for (std::size_t e = 0; e < episodes.size(); ++e) {
    if (e) std::fputc('\n', f);  // blank separator line between episodes
    for (const Frame& fr : episodes[e]) {
      line.clear();
      line += "{\"t\":" + std::to_string(fr.t);
      line += ",\"context\":" + std::to_string(fr.context);
      line += ",\"label\":";
      line += fr.label < 0 ? "null" : std::to_string(fr.label);
      line += ",\"features\":";
      append_vector(line, fr.features);
      if (fr.view2.size() > 0) {
        line += ",\"view2\":";
        append_vector(line, fr.view2);
      }
      line += "}\n";
      std::fputs(line.c_str(), f);
    }
  }
  if (std::fclose(f) != 0) throw IoError("failed writing episode file: " + path);
}

std::vector<Episode> load_episodes(const std::string& path, double synth_view_sigma,
                                   std::uint64_t seed) {
  std::ifstream in(path);
  if (!in.good()) throw IoError("cannot open episode file: " + path);
  Rng synth(derive_seed(seed, 0x51D));
  std::vector<Episode> episodes;
  Episode current;
  Eigen::Index dim = -1;
  std::string line;
  std::size_t line_no = 0;
  auto flush = [&] {
    if (!current.empty()) {
      episodes.push_back(std::move(current));
      current.clear();
    }
  };
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) {
      flush();
      continue;
    }
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded()) fail_line(line_no, "malformed JSON");
    if (!j.is_object()) fail_line(line_no, "frame must be a JSON object");
    for (const auto& item : j.items())
      if (item.key() != "t" && item.key() != "context" && item.key() != "label" &&
          item.key() != "features" && item.key() != "view2")
        fail_line(line_no, "unknown key \"" + item.key() + "\"");
    if (!j.contains("t") || !j["t"].is_number_integer()) fail_line(line_no, "t must be an integer");
    if (!j.contains("context") || !j["context"].is_number_integer())
      fail_line(line_no, "context must be an integer");
    if (!j.contains("features")) fail_line(line_no, "missing features");
    Frame f;
    f.t = j["t"].get<std::int64_t>();
    f.context = j["context"].get<std::int64_t>();
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_number_integer()) fail_line(line_no, "label must be an integer or null");
      f.label = j["label"].get<std::int64_t>();
    }
    f.features = parse_vector(j["features"], line_no, "features");
    if (dim < 0) dim = f.features.size();
    if (f.features.size() != dim)
      fail_line(line_no, "features length " + std::to_string(f.features.size()) +
                             " does not match stream dimension " + std::to_string(dim));
    if (j.contains("view2")) {
      f.view2 = parse_vector(j["view2"], line_no, "view2");
      if (f.view2.size() != dim)
        fail_line(line_no, "view2 length " + std::to_string(f.view2.size()) +
                               " does not match stream dimension " + std::to_string(dim));
    } else {
      f.view2 = f.features;
      for (Eigen::Index i = 0; i < f.view2.size(); ++i)
        f.view2[i] += synth_view_sigma * synth.normal();
    }
    current.push_back(std::move(f));
  }
  flush();
  return episodes;
}

}  // namespace protostream
