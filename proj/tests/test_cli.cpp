#include <doctest.h>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "cli_harness.hpp"
#include "protostream/checkpoint.hpp"
#include "protostream/config.hpp"
#include "protostream/errors.hpp"

using namespace protostream;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small, fast run shared by the command tests.
const std::string kTinyArgs =
    " --set train.steps=6 --set stream.episode_len=10 --set stream.contexts=2"
    " --set stream.pool=3 --set eval.episodes=3 --set encoder.kind=linear"
    " --set encoder.hidden_dim=0 --set memory.capacity=8 --set train.log_every=1";

}  // namespace

TEST_CASE("gen writes byte-identical files under a repeated seed") {
  TempDir a("cli_gen_a"), b("cli_gen_b");
  CmdResult ra = run_cli("gen --profile default --seed 9 --episodes 3 --out " + a.path +
                         " --set stream.episode_len=10 --set stream.contexts=2");
  CmdResult rb = run_cli("gen --profile default --seed 9 --episodes 3 --out " + b.path +
                         " --set stream.episode_len=10 --set stream.contexts=2");
  REQUIRE(ra.exit_code == 0);
  REQUIRE(rb.exit_code == 0);
  CHECK(slurp(a.path + "/episodes.jsonl") == slurp(b.path + "/episodes.jsonl"));
  CHECK(ra.summary.at("episodes") == 3);
  CHECK(ra.summary.at("frames") == 30);
  CHECK(ra.summary.at("format_version") == 1);
  CHECK(ra.summary.at("classes").get<int>() >= 2);
  double lag1 = ra.summary.at("lag1_same_class_rate").get<double>();
  CHECK(lag1 > 0.0);
  CHECK(lag1 < 1.0);
}

TEST_CASE("gen with full distractor replacement from a single-class pool") {
  TempDir d("cli_gen_d");
  CmdResult r = run_cli(
      "gen --profile default --seed 9 --episodes 2 --out " + d.path +
      " --set stream.episode_len=8 --set stream.distractor_rate=1.0"
      " --set stream.distractor_pool=1");
  REQUIRE(r.exit_code == 0);
  CHECK(r.summary.at("classes") == 1);
  CHECK(r.summary.at("lag1_same_class_rate") == 1.0);
}

TEST_CASE("train with steps=0 emits just the initial checkpoint") {
  TempDir t("cli_train0");
  CmdResult r = run_cli("train --profile default --seed 4 --out " + t.path + kTinyArgs +
                        " --set train.steps=0");
  REQUIRE(r.exit_code == 0);
  CHECK(r.summary.at("steps_run") == 0);
  Checkpoint ck = load_checkpoint(t.path + "/checkpoint.json");
  CHECK(ck.step == 0);
  CHECK(ck.adam_t == 0);
  RunConfig echoed = run_config_from_json(ck.config_echo);
  Eigen::VectorXd expect = flatten(make_initial_params(echoed));
  Eigen::VectorXd got = flatten(ck.params);
  REQUIRE(expect.size() == got.size());
  CHECK(expect == got);
}

TEST_CASE("resumed training matches the uninterrupted run exactly") {
  TempDir a("cli_res_a"), b("cli_res_b"), c("cli_res_c");
  CmdResult full = run_cli("train --profile default --seed 12 --out " + a.path + kTinyArgs);
  REQUIRE(full.exit_code == 0);

  CmdResult half = run_cli("train --profile default --seed 12 --out " + b.path + kTinyArgs +
                           " --set train.steps=3 --set train.checkpoint_every=3");
  REQUIRE(half.exit_code == 0);
  CmdResult rest = run_cli("train --resume " + b.path + "/checkpoint_3.json --out " + c.path +
                           " --set train.steps=6");
  REQUIRE(rest.exit_code == 0);
  CHECK(rest.summary.at("steps_run") == 3);
  CHECK(rest.summary.at("final_step") == 6);

  json one = json::parse(slurp(a.path + "/checkpoint.json"));
  json two = json::parse(slurp(c.path + "/checkpoint.json"));
  CHECK(one.at("params") == two.at("params"));
  CHECK(one.at("adam_m") == two.at("adam_m"));
  CHECK(one.at("adam_v") == two.at("adam_v"));
  CHECK(one.at("adam_t") == two.at("adam_t"));
  CHECK(one.at("step") == two.at("step"));
}

TEST_CASE("eval reports a full unsupervised summary and per-episode scores") {
  TempDir t("cli_eval_t"), e("cli_eval_e");
  REQUIRE(run_cli("train --profile default --seed 5 --out " + t.path + kTinyArgs).exit_code ==
          0);
  CmdResult r = run_cli("eval --checkpoint " + t.path + "/checkpoint.json --out " + e.path +
                        " --sweep-alpha --dump-embeddings emb.csv");
  REQUIRE(r.exit_code == 0);
  CHECK(r.summary.at("protocol") == "unsupervised");
  CHECK(r.summary.at("episodes") == 3);
  for (const char* key : {"ami", "ari", "homogeneity", "completeness", "ami_max", "alpha_max"})
    CHECK(std::isfinite(r.summary.at(key).get<double>()));
  CHECK(r.summary.at("sweep").at("alpha").size() == 21);

  std::string csv = slurp(e.path + "/eval_episodes.csv");
  CHECK(csv.substr(0, 14) == "episode,score\n");
  CHECK(std::count(csv.begin(), csv.end(), '\n') == 4);

  std::string emb = slurp(e.path + "/emb.csv");
  CHECK(emb.substr(0, 21) == "episode,frame,t,label");
  CHECK(std::count(emb.begin(), emb.end(), '\n') == 31);  // header + 3 episodes x 10 frames

  json file_summary = json::parse(slurp(e.path + "/eval_summary.json"));
  CHECK(file_summary == r.summary);
}

TEST_CASE("a one-point alpha sweep equals the fixed-threshold result") {
  TempDir t("cli_eval1_t"), e("cli_eval1_e"), f("cli_eval1_f");
  REQUIRE(run_cli("train --profile default --seed 6 --out " + t.path + kTinyArgs).exit_code ==
          0);
  CmdResult swept = run_cli("eval --checkpoint " + t.path + "/checkpoint.json --out " + e.path +
                            " --sweep-alpha --alphas 0.9275");
  CmdResult fixed = run_cli("eval --checkpoint " + t.path + "/checkpoint.json --out " + f.path +
                            " --set memory.alpha=0.9275");
  REQUIRE(swept.exit_code == 0);
  REQUIRE(fixed.exit_code == 0);
  CHECK(swept.summary.at("alpha_max") == 0.9275);
  CHECK(swept.summary.at("ami_max") == fixed.summary.at("ami"));
}

TEST_CASE("eval refuses streams whose dims do not match the checkpoint") {
  TempDir t("cli_dim_t"), g("cli_dim_g"), e("cli_dim_e");
  REQUIRE(run_cli("train --profile default --seed 7 --out " + t.path + kTinyArgs).exit_code ==
          0);
  REQUIRE(run_cli("gen --profile default --seed 7 --episodes 2 --out " + g.path +
                  " --set stream.episode_len=6 --set stream.obs_dim=8"
                  " --set stream.latent_dim=8 --set encoder.input_dim=8"
                  " --set encoder.output_dim=8")
              .exit_code == 0);
  CmdResult r = run_cli("eval --checkpoint " + t.path + "/checkpoint.json --out " + e.path +
                        " --stream " + g.path + "/episodes.jsonl");
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("dim 8") != std::string::npos);
  CHECK(r.err.find("16") != std::string::npos);
}

TEST_CASE("supervised eval on an unlabeled stream fails cleanly") {
  TempDir t("cli_lab_t"), e("cli_lab_e");
  REQUIRE(run_cli("train --profile default --seed 8 --out " + t.path + kTinyArgs).exit_code ==
          0);
  const std::string stream = "cli_unlabeled.jsonl";
  {
    std::ofstream out(stream);
    for (int i = 0; i < 4; ++i) {
      out << R"({"t":)" << i << R"(,"context":0,"label":null,"features":[)";
      for (int d = 0; d < 16; ++d) out << (d ? "," : "") << (d == i ? 1.0 : 0.1);
      out << "]}\n";
    }
  }
  CmdResult r = run_cli("eval --checkpoint " + t.path + "/checkpoint.json --out " + e.path +
                        " --stream " + stream + " --protocol supervised");
  std::remove(stream.c_str());
  CHECK(r.exit_code == 1);
  CHECK(r.err.find("labeled") != std::string::npos);
  CHECK(r.err.find("supervised") != std::string::npos);
}

TEST_CASE("gradcheck exits nonzero when pushed below attainable tolerance") {
  std::string base =
      "gradcheck --profile default --seed 11 --set stream.episode_len=5"
      " --set stream.contexts=1 --set stream.pool=3 --set stream.obs_dim=6"
      " --set stream.latent_dim=6 --set encoder.kind=identity --set encoder.input_dim=6"
      " --set encoder.output_dim=6 --set memory.capacity=6";
  CmdResult ok = run_cli(base);
  REQUIRE(ok.exit_code == 0);
  CHECK(ok.summary.at("ok") == true);
  CHECK(ok.summary.at("max_rel_err").get<double>() < 1e-6);
  CHECK(ok.summary.at("group_max_rel_err").contains("beta"));

  CmdResult bad = run_cli(base + " --tolerance 1e-15");
  CHECK(bad.exit_code == 2);
  CHECK(bad.summary.at("ok") == false);
  CHECK(bad.err.find("exceeds tolerance") != std::string::npos);
}

TEST_CASE("a single-value sweep reproduces train plus eval") {
  TempDir s("cli_sw_s"), t("cli_sw_t"), e("cli_sw_e");
  CmdResult sweep = run_cli("sweep --profile default --seed 13 --out " + s.path +
                            " --param rho --values 0.995" + kTinyArgs);
  REQUIRE(sweep.exit_code == 0);
  REQUIRE(run_cli("train --profile default --seed 13 --out " + t.path + kTinyArgs).exit_code ==
          0);
  CmdResult eval = run_cli("eval --checkpoint " + t.path + "/checkpoint.json --out " + e.path);
  REQUIRE(eval.exit_code == 0);

  const json& row = sweep.summary.at("rows").at(0);
  CHECK(row.at("value") == 0.995);
  CHECK(row.at("ami") == eval.summary.at("ami"));
  std::string csv = slurp(s.path + "/sweep.csv");
  CHECK(csv.substr(0, 13) == "value,ami,ap\n");
}

TEST_CASE("a distractor sweep emits the relative curve anchored at one") {
  TempDir s("cli_sw_d");
  CmdResult r = run_cli("sweep --profile default --seed 14 --out " + s.path +
                        " --param distractor_rate --values 0,0.5" + kTinyArgs +
                        " --set eval.workers=2");
  REQUIRE(r.exit_code == 0);
  std::string csv = slurp(s.path + "/sweep.csv");
  CHECK(csv.substr(0, 36) == "value,ami,ami_untrained,relative_ami");
  CHECK(r.summary.at("rows").at(0).at("relative_ami") == 1.0);
  CHECK(std::isfinite(r.summary.at("rows").at(1).at("relative_ami").get<double>()));
}

TEST_CASE("exit codes separate validation, numerical, and io failures") {
  CmdResult unknown_flag = run_cli("train --no-such-flag");
  CHECK(unknown_flag.exit_code == 1);

  CmdResult bad_profile = run_cli("gen --profile nope --out cli_x");
  CHECK(bad_profile.exit_code == 1);
  CHECK(bad_profile.err.find("valid profiles") != std::string::npos);

  CmdResult bad_set = run_cli("gen --profile default --out cli_x --set memory.nope=1");
  CHECK(bad_set.exit_code == 1);

  CmdResult missing_ck = run_cli("eval --checkpoint cli_no_such.json --out cli_x");
  CHECK(missing_ck.exit_code == 3);

  // A poisoned checkpoint (tau_raw -> softplus 0 -> division by zero) must
  // surface as a numerical failure, not a crash.
  RunConfig poisoned_cfg = profile_config("default");
  poisoned_cfg.seed = 3;
  poisoned_cfg.encoder.kind = EncoderKind::linear;
  poisoned_cfg.stream.episode_len = 10;
  poisoned_cfg.stream.contexts = 2;
  poisoned_cfg.stream.pool = 3;
  poisoned_cfg.memory.capacity = 8;
  poisoned_cfg.steps = 6;
  Checkpoint poison;
  poison.params = make_initial_params(poisoned_cfg);
  poison.params.tau_raw = -800.0;
  poison.adam_m = Eigen::VectorXd::Zero(param_count(poisoned_cfg.encoder));
  poison.adam_v = Eigen::VectorXd::Zero(param_count(poisoned_cfg.encoder));
  poison.config_echo = run_config_to_json(poisoned_cfg);
  save_checkpoint("cli_poison.json", poison);
  CmdResult nan_train = run_cli("train --resume cli_poison.json --out cli_nan");
  std::remove("cli_poison.json");
  fs::remove_all("cli_nan");
  CHECK(nan_train.exit_code == 2);
  CHECK(nan_train.err.find("train step") != std::string::npos);
  fs::remove_all("cli_x");
}

TEST_CASE("both config channels reach the same run") {
  TempDir a("cli_cfg_a"), b("cli_cfg_b");
  const std::string cfg_file = "cli_config.json";
  {
    std::ofstream out(cfg_file);
    out << R"({"profile": "default", "seed": 21, "stream": {"episode_len": 10, "contexts": 2},)"
        << R"( "train": {"steps": 4, "log_every": 1}, "encoder": {"kind": "linear"},)"
        << R"( "memory": {"capacity": 8}})";
  }
  CmdResult from_file = run_cli("train --config " + cfg_file + " --out " + a.path);
  CmdResult from_sets = run_cli(
      "train --profile default --seed 21 --out " + b.path +
      " --set stream.episode_len=10 --set stream.contexts=2 --set train.steps=4"
      " --set train.log_every=1 --set encoder.kind=linear --set memory.capacity=8");
  std::remove(cfg_file.c_str());
  REQUIRE(from_file.exit_code == 0);
  REQUIRE(from_sets.exit_code == 0);
  json one = json::parse(slurp(a.path + "/checkpoint.json"));
  json two = json::parse(slurp(b.path + "/checkpoint.json"));
  CHECK(one.at("params") == two.at("params"));
  CHECK(one.at("config").at("train").at("steps") == 4);
}
