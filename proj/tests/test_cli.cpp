#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "loraq/bundle_io.hpp"
#include "loraq/cli.hpp"
#include "test_support.hpp"

using namespace loraq;
using namespace loraq::testing;
namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run cli(std::vector<std::string> args) {
  std::ostringstream out, err;
  const int code = run_cli(args, out, err);
  return {code, out.str(), err.str()};
}

struct Workspace {
  fs::path dir;
  Workspace() {
    dir = fs::temp_directory_path() / ("loraq_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(dir);
  }
  ~Workspace() { fs::remove_all(dir); }
  std::string path(const std::string &name) const { return (dir / name).string(); }
  std::string weight(const std::string &name, const Matrix &m) const {
    save_tensor(path(name), m);
    return path(name);
  }
};

const std::vector<std::string> kFast = {"--steps", "20", "--rot-steps", "20"};

std::vector<std::string> join(std::vector<std::string> a, const std::vector<std::string> &b) {
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

} // namespace

TEST_CASE("exit codes") {
  CHECK(exit_code_for(ErrorCode::Shape) == 10);
  CHECK(exit_code_for(ErrorCode::CorruptFile) == 16);
  CHECK(exit_code_for(ErrorCode::Io) == 20);
}

TEST_CASE("usage errors exit 2") {
  CHECK(cli({}).code == 2);
  CHECK(cli({"frobnicate"}).code == 2);
  CHECK(cli({"quantize"}).code == 2);
  auto r = cli({"quantize", "w.lqt", "--steps", "many"});
  CHECK(r.code == 2);
  CHECK(r.err.rfind("error: code=USAGE_ERROR exit=2 message=", 0) == 0);
  CHECK(cli({"--help"}).code == 0);
}

TEST_CASE("quantize with defaults caps the rank and warns") {
  Workspace ws;
  Rng rng(1);
  const auto w = ws.weight("w.lqt", heavy_tailed(rng, 64, 48));
  auto r = cli({"quantize", w});
  REQUIRE(r.code == 0);
  CHECK(r.err.find("warning: ") != std::string::npos);
  CHECK(r.err.find("capped") != std::string::npos);
  CHECK(r.out.find("(requested 128, capped)") != std::string::npos);
  const auto b = load_bundle(ws.path("w.lrqb"));
  CHECK(b.meta.rank == 48);
  CHECK(b.residual.format.name == "SINT4");
  CHECK(b.lowrank_left.format.name == "SINT4");
  CHECK(b.meta.optimized_lr);
  CHECK(b.meta.rotations);
}

TEST_CASE("quantize baseline flags and machine output") {
  Workspace ws;
  Rng rng(2);
  const auto w = ws.weight("w.lqt", heavy_tailed(rng, 32, 40));
  auto r = cli({"--machine", "quantize", w, "--q1", "MXINT4", "--q2", "MXFP8e4", "--budget",
                "128", "--no-optimize", "--no-rotate", "--out", ws.path("base.lrqb")});
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  CHECK(j["command"] == "quantize");
  REQUIRE(j["results"].size() == 1);
  const auto &res = j["results"][0];
  CHECK(res["rank"] == 16);
  CHECK(res["rank_capped"] == false);
  CHECK(res["budget"]["payload_bits_per_channel"] == 128);
  const auto b = load_bundle(ws.path("base.lrqb"));
  CHECK(!b.meta.optimized_lr);
  CHECK(!b.meta.rotations);
  const auto rep = error_report(load_tensor(w), Matrix(Matrix::Identity(32, 32)), b);
  CHECK(res["report"]["weight_err"].get<double>() == rep.weight_err);
}

TEST_CASE("quantize is deterministic") {
  Workspace ws;
  Rng rng(3);
  const auto w = ws.weight("w.lqt", heavy_tailed(rng, 24, 32));
  auto args = join({"quantize", w, "--q1", "MXFP4e2", "--q2", "MXFP4e2", "--rank", "6"}, kFast);
  REQUIRE(cli(join(args, {"--out", ws.path("a.lrqb")})).code == 0);
  REQUIRE(cli(join(args, {"--out", ws.path("b.lrqb")})).code == 0);
  CHECK(read_file(ws.path("a.lrqb")) == read_file(ws.path("b.lrqb")));
}

TEST_CASE("several inputs write into an output directory") {
  Workspace ws;
  Rng rng(4);
  const auto a = ws.weight("a.lqt", gaussian(rng, 16, 16));
  const auto b = ws.weight("b.lqt", gaussian(rng, 20, 16));
  auto r = cli(join({"quantize", a, b, "--rank", "4", "--out", ws.path("outdir")}, kFast));
  REQUIRE(r.code == 0);
  CHECK(fs::exists(ws.path("outdir/a.lrqb")));
  CHECK(load_bundle(ws.path("outdir/b.lrqb")).meta.rows == 20);
}

TEST_CASE("evaluate matches the library report") {
  Workspace ws;
  Rng rng(5);
  const Matrix wm = heavy_tailed(rng, 32, 24);
  const Matrix xm = gaussian(rng, 8, 32);
  const auto w = ws.weight("w.lqt", wm);
  const auto x = ws.weight("x.lqt", xm);
  REQUIRE(cli(join({"quantize", w, "--q1", "MXINT4", "--q2", "MXINT8", "--rank", "4"}, kFast))
              .code == 0);
  const auto bundle = ws.path("w.lrqb");
  auto r = cli({"--machine", "evaluate", bundle, w, "--x", x, "--act-format", "MXINT8"});
  REQUIRE(r.code == 0);
  const json rep = json::parse(r.out)["report"];
  const auto expect = error_report(wm, xm, load_bundle(bundle), make_format("MXINT8"));
  CHECK(rep["weight_err"].get<double>() == expect.weight_err);
  CHECK(rep["matmul_err"].get<double>() == expect.matmul_err);
  CHECK(rep["bound_rhs"].get<double>() == expect.bound_rhs);
  CHECK(rep["matmul_err"].get<double>() <= rep["bound_rhs"].get<double>());

  auto id = cli({"--machine", "evaluate", bundle, w});
  REQUIRE(id.code == 0);
  const json idr = json::parse(id.out)["report"];
  CHECK(idr["matmul_err"].get<double>() ==
        doctest::Approx(idr["weight_err"].get<double>()).epsilon(1e-14));

  auto human = cli({"evaluate", bundle, w});
  CHECK(human.out.find("weight_err") != std::string::npos);

  auto shape = cli({"evaluate", bundle, ws.weight("bad.lqt", gaussian(rng, 8, 8))});
  CHECK(shape.code == 10);
  CHECK(shape.err.find("code=SHAPE_ERROR exit=10") != std::string::npos);
}

TEST_CASE("ablate on passthrough gives four identical cells") {
  Workspace ws;
  Rng rng(6);
  const auto w = ws.weight("w.lqt", gaussian(rng, 12, 12));
  auto r = cli(join({"--machine", "ablate", w, "--q1", "passthrough", "--q2", "passthrough",
                     "--rank", "4"},
                    kFast));
  REQUIRE(r.code == 0);
  const json j = json::parse(r.out);
  REQUIRE(j["cells"].size() == 4);
  const double first = j["cells"][0]["mean_weight_err"];
  for (const auto &c : j["cells"])
    CHECK(c["mean_weight_err"].get<double>() == doctest::Approx(first).epsilon(1e-12));
  auto human = cli(join({"ablate", w, "--q1", "MXINT8", "--rank", "4"}, kFast));
  CHECK(human.code == 0);
  CHECK(human.out.find("optimized_lr") == 0);
}

TEST_CASE("inspect reports the budget line") {
  Workspace ws;
  Rng rng(7);
  const auto w = ws.weight("w.lqt", gaussian(rng, 40, 40));
  REQUIRE(cli(join({"quantize", w, "--q2", "MXFP6e2", "--budget", "100"}, kFast)).code == 0);
  auto r = cli({"inspect", ws.path("w.lrqb")});
  REQUIRE(r.code == 0);
  CHECK(r.out.find("rank 16 x 6 bits = 96 bits/channel (of 100)") != std::string::npos);
  auto m = cli({"--machine", "inspect", ws.path("w.lrqb")});
  const json j = json::parse(m.out);
  CHECK(j["budget"]["payload_bits_per_channel"] == 96);
  CHECK(j["manifest"]["meta"]["rank"] == 16);
}

TEST_CASE("file errors map to exit codes") {
  Workspace ws;
  Rng rng(8);
  const auto w = ws.weight("w.lqt", gaussian(rng, 16, 16));
  REQUIRE(cli(join({"quantize", w, "--rank", "2"}, kFast)).code == 0);
  Bytes b = read_file(ws.path("w.lrqb"));
  b.resize(b.size() - 3);
  write_file(ws.path("cut.lrqb"), b);
  auto cut = cli({"inspect", ws.path("cut.lrqb")});
  CHECK(cut.code == 16);
  CHECK(cut.err.find("code=CORRUPT_FILE") != std::string::npos);
  CHECK(cli({"inspect", ws.path("nope.lrqb")}).code == 20);
  CHECK(cli({"inspect", w}).code == 15);
  CHECK(cli({"quantize", w, "--q1", "INT3"}).code == 14);
  CHECK(cli({"quantize", w, "--rank", "2", "--budget", "64"}).code == 11);
  CHECK(cli({"quantize", w, "--budget", "2"}).code == 18);
  CHECK(cli({"quantize", w, "--stats", w + "x"}).code == 20);
}

TEST_CASE("config file with flag overrides") {
  Workspace ws;
  Rng rng(9);
  const auto w = ws.weight("w.lqt", gaussian(rng, 32, 32));
  {
    std::ofstream cfg(ws.path("cfg.json"));
    cfg << R"({"q1": "MXINT8", "q2": "MXFP8e4", "rank": 3, "steps": 10, "rot_steps": 10,
               "rotate": false, "seed": 5, "out": ")"
        << ws.path("fromcfg.lrqb") << R"("})";
  }
  REQUIRE(cli({"quantize", w, "--config", ws.path("cfg.json")}).code == 0);
  auto b = load_bundle(ws.path("fromcfg.lrqb"));
  CHECK(b.residual.format.name == "MXINT8");
  CHECK(b.meta.rank == 3);
  CHECK(!b.meta.rotations);
  CHECK(b.meta.absorb_seed == 5);

  REQUIRE(cli({"quantize", w, "--config", ws.path("cfg.json"), "--q1", "SINT4", "--budget", "32",
               "--out", ws.path("override.lrqb")})
              .code == 0);
  auto o = load_bundle(ws.path("override.lrqb"));
  CHECK(o.residual.format.name == "SINT4");
  CHECK(o.meta.rank == 4);

  {
    std::ofstream bad(ws.path("bad.json"));
    bad << R"({"q1": "MXINT8", "colour": "blue"})";
  }
  CHECK(cli({"quantize", w, "--config", ws.path("bad.json")}).code == 11);
}

TEST_CASE("smoothing from stats and calibration files") {
  Workspace ws;
  Rng rng(10);
  Matrix xm = gaussian(rng, 40, 24);
  xm.col(2) *= 50;
  const auto w = ws.weight("w.lqt", gaussian(rng, 24, 32, 0.05));
  const auto x = ws.weight("x.lqt", xm);
  save_stats(ws.path("s.lqs"), compute_channel_stats(xm));
  REQUIRE(cli(join({"quantize", w, "--rank", "4", "--stats", ws.path("s.lqs"), "--out",
                    ws.path("st.lrqb")},
                   kFast))
              .code == 0);
  auto st = load_bundle(ws.path("st.lrqb"));
  CHECK(st.meta.smoothing_source == "stats");
  CHECK(st.gamma.has_value());
  REQUIRE(cli(join({"quantize", w, "--q1", "MXINT4", "--rank", "4", "--stats", x, "--out",
                    ws.path("cal.lrqb")},
                   kFast))
              .code == 0);
  CHECK(load_bundle(ws.path("cal.lrqb")).meta.smoothing_source == "calibration");
  CHECK(cli({"quantize", w, "--stats", ws.path("st.lrqb")}).code == 15);
}
