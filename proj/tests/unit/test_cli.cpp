// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <fstream>
#include <regex>
#include <sstream>

#include <json.hpp>

#include "maskuno/cli/cli.hpp"
#include "maskuno/synth/annotations.hpp"
#include "support.hpp"

using namespace maskuno;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  int code;
  std::string out, err;
};

Outcome invoke(const fs::path& root, std::vector<std::string> args) {
  args.insert(args.begin(), {"--out-root", root.string()});
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

const std::vector<std::string> kGenerate{"generate", "--classes", "3",     "--train", "12",   "--val",
                                         "8",        "--seed",    "4",     "--size",  "64",   "--max-instances",
                                         "3",        "--rare-class", "0", "--out",   "data"};

nlohmann::json read_json(const fs::path& p) {
  std::ifstream in(p);
  return nlohmann::json::parse(in);
}

}  // namespace

TEST_SUITE("cli") {
  TEST_CASE("generate is deterministic and reports per-class sizes") {
    testsupport::TempDir a("cli-gen-a"), b("cli-gen-b");
    const auto ra = invoke(a.path(), kGenerate);
    const auto rb = invoke(b.path(), kGenerate);
    REQUIRE(ra.code == 0);
    REQUIRE(rb.code == 0);
    CHECK(synth::dataset_digest(a / "data") == synth::dataset_digest(b / "data"));

    const auto val = synth::load_split(a / "data", synth::Split::Val);
    for (int c = 1; c <= 3; ++c) {
      const auto sub = synth::split_validation_per_class(val, core::ClassLabel{c}, 3);
      std::size_t instances = 0;
      for (const auto& s : sub.samples) instances += s.annotations.size();
      const std::string line = "  " + std::to_string(c) + " " + synth::class_name(c) + ": " +
                               std::to_string(sub.samples.size()) + " images, " + std::to_string(instances) +
                               " instances";
      CHECK(ra.out.find(line) != std::string::npos);
    }
    CHECK(fs::exists(a / "data.manifest.json"));
  }

  TEST_CASE("usage errors exit with code 2") {
    testsupport::TempDir root("cli-usage");
    CHECK(invoke(root.path(), {"generate", "--classes", "3"}).code == cli::kExitUsage);
    CHECK(invoke(root.path(), {"no-such-command"}).code == cli::kExitUsage);
    CHECK(invoke(root.path(), {"evaluate", "--data", "missing"}).code != 0);
    CHECK(cli::exit_code_for(ErrorKind::Incomparable) == cli::kExitIncomparable);
    CHECK(cli::exit_code_for(ErrorKind::Divergence) == cli::kExitDivergence);
    CHECK(cli::exit_code_for(ErrorKind::Data) == cli::kExitData);
  }

  TEST_CASE("ground truth predictions score 1 and identical reports compare to zero") {
    testsupport::TempDir root("cli-eval");
    REQUIRE(invoke(root.path(), kGenerate).code == 0);
    const auto val = synth::load_split(root / "data", synth::Split::Val);
    cli::write_predictions(root / "gt.json", val, eval::ground_truth_predictions(val));
    const auto back = cli::read_predictions(root / "gt.json", val);
    REQUIRE(back.size() == val.size());

    const auto r = invoke(root.path(), {"evaluate", "--predictions", (root / "gt.json").string(), "--data", "data",
                                        "--tag", "oracle", "--out", "gt-report.json"});
    REQUIRE(r.code == 0);
    const auto report = read_json(root / "gt-report.json");
    for (const auto& c : report.at("classes"))
      for (const auto& [k, v] : c.at("breakdown").items())
        if (!v.is_null()) CHECK(v.get<double>() == doctest::Approx(1.0));

    const auto cmp = invoke(root.path(), {"compare", "--before", "gt-report.json", "--after", "gt-report.json"});
    REQUIRE(cmp.code == 0);
    const auto j = read_json(root / "comparison" / "comparison.json");
    REQUIRE(j.size() == 1u);
    for (const auto& row : j[0].at("rows"))
      for (const auto& d : row.at("delta"))
        if (!d.is_null()) CHECK(d.get<double>() == 0.0);
    CHECK(fs::exists(root / "comparison" / "chart.svg"));
    CHECK(fs::exists(root / "comparison" / "table.csv"));
  }

  TEST_CASE("full command chain replays to identical outputs") {
    testsupport::TempDir root("cli-chain"), again("cli-replay");
    REQUIRE(invoke(root.path(), kGenerate).code == 0);
    const auto t = invoke(root.path(), {"train-baseline", "--data", "data", "--epochs", "1", "--batch", "4"});
    INFO(t.err);
    REQUIRE(t.code == 0);
    REQUIRE(invoke(root.path(), {"surgery", "--checkpoint", "baseline.ckpt"}).code == 0);
    REQUIRE(invoke(root.path(), {"train-heads", "--checkpoint", "maskuno.ckpt", "--data", "data", "--head-epochs",
                                 "1", "--mode", "parallel"})
                .code == 0);
    const auto untrained = invoke(root.path(), {"evaluate", "--checkpoint", "maskuno.ckpt", "--data", "data"});
    CHECK(untrained.code == cli::kExitData);
    REQUIRE(invoke(root.path(), {"evaluate", "--checkpoint", "baseline.ckpt", "--data", "data", "--out", "before.json"})
                .code == 0);
    REQUIRE(invoke(root.path(), {"evaluate", "--checkpoint", "maskuno-trained.ckpt", "--data", "data", "--out",
                                 "after.json", "--misrouting", "misrouting.json"})
                .code == 0);
    REQUIRE(invoke(root.path(), {"compare", "--before", "before.json", "--after", "after.json"}).code == 0);

    for (const char* manifest : {"data.manifest.json", "baseline.ckpt.manifest.json", "maskuno.ckpt.manifest.json",
                                 "maskuno-trained.ckpt.manifest.json", "after.json.manifest.json",
                                 "comparison.manifest.json"}) {
      INFO(manifest);
      REQUIRE(fs::exists(root / manifest));
      const auto m = cli::read_manifest(root / manifest);
      CHECK(!m.outputs.empty());
      const auto r = invoke(root.path(), {"replay", "--manifest", (root / manifest).string(), "--out-root",
                                          (again / manifest).string()});
      INFO(r.out);
      INFO(r.err);
      CHECK(r.code == 0);
      CHECK(r.out.find("MISMATCH") == std::string::npos);
    }
  }

  TEST_CASE("mismatched datasets are incomparable") {
    testsupport::TempDir root("cli-incomparable");
    REQUIRE(invoke(root.path(), kGenerate).code == 0);
    auto other = kGenerate;
    other[8] = "5";
    other.back() = "data2";
    REQUIRE(invoke(root.path(), other).code == 0);
    for (const char* d : {"data", "data2"}) {
      const auto val = synth::load_split(root / d, synth::Split::Val);
      cli::write_predictions(root / (std::string(d) + ".preds.json"), val, eval::ground_truth_predictions(val));
      REQUIRE(invoke(root.path(), {"evaluate", "--predictions", (root / (std::string(d) + ".preds.json")).string(),
                                   "--data", d, "--out", std::string(d) + ".json"})
                  .code == 0);
    }
    CHECK(invoke(root.path(), {"compare", "--before", "data.json", "--after", "data2.json"}).code ==
          cli::kExitIncomparable);
  }
}
