// Acceptance checks, one PASS/FAIL line per criterion.
//
//   acceptance [--only N] [--work-dir DIR]
//
// Exit status is 0 when every selected criterion passes.

#include "fusionunet/audit.hpp"
#include "fusionunet/metrics.hpp"
#include "fusionunet/train.hpp"

#include "CLI11.hpp"

#include <cmath>
#include <cstdio>
#include <ctime>
#include <functional>
#include <map>
#include <sstream>
#include <string>

namespace fu = fusionunet;
using fu::Index;
using fu::Shape;

namespace {

struct Outcome {
  bool passed = false;
  std::string detail;
};

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

double cpu_seconds() { return static_cast<double>(std::clock()) / CLOCKS_PER_SEC; }

fu::Tensor<double> random_tensor(Shape shape, fu::Rng& rng) {
  fu::Vector<double> v(fu::numel(shape));
  for (Index i = 0; i < v.size(); ++i) v[i] = fu::normal(rng);
  return fu::Tensor<double>(std::move(shape), std::move(v));
}

bool bitwise_equal(const fu::Tensor<double>& a, const fu::Tensor<double>& b) {
  if (a.shape() != b.shape()) return false;
  for (Index i = 0; i < a.size(); ++i) {
    if (a.value()[i] != b.value()[i]) return false;
  }
  return true;
}

// 1. Finite-difference audit of every op, block and the small full model.
Outcome gradient_audit() {
  const double start = cpu_seconds();
  const fu::AuditReport report = fu::run_gradient_audit();
  const double elapsed = cpu_seconds() - start;
  double worst = 0.0;
  std::string worst_name;
  Index failed = 0;
  for (const auto& e : report.entries) {
    if (e.result.max_rel_error >= worst) {
      worst = e.result.max_rel_error;
      worst_name = e.name;
    }
    failed += e.passed ? 0 : 1;
  }
  const bool ok = report.passed() && elapsed < 300.0;
  return {ok, format("%zu checks, %ld failed, %zu ops uncovered, worst rel err %.2e (%s) < 1e-4, %.0f s CPU < 300 s",
                     report.entries.size(), static_cast<long>(failed), report.missing_ops.size(), worst,
                     worst_name.c_str(), elapsed)};
}

// 2. reorganize / inverse_reorganize on 1,000 random tensors.
Outcome reorganize_bijection() {
  fu::Rng rng(2002);
  Index mismatches = 0, roundtrip_failures = 0;
  for (int t = 0; t < 1000; ++t) {
    const Index N = fu::uniform_int(rng, 1, 3), C = fu::uniform_int(rng, 1, 8);
    const Index H = 2 * fu::uniform_int(rng, 1, 8), W = 2 * fu::uniform_int(rng, 1, 8);
    const auto x = random_tensor({N, C, H, W}, rng);
    const auto y = fu::reorganize(x);
    if (!bitwise_equal(fu::inverse_reorganize(y), x)) ++roundtrip_failures;
    const Index h = H / 2, w = W / 2;
    for (Index n = 0; n < N; ++n)
      for (Index c = 0; c < C; ++c)
        for (Index dy = 0; dy < 2; ++dy)
          for (Index dx = 0; dx < 2; ++dx)
            for (Index i = 0; i < h; ++i)
              for (Index j = 0; j < w; ++j) {
                const double out = y.value()[((n * 4 * C + 4 * c + 2 * dy + dx) * h + i) * w + j];
                const double in = x.value()[((n * C + c) * H + 2 * i + dy) * W + 2 * j + dx];
                if (out != in) ++mismatches;
              }
  }
  return {mismatches == 0 && roundtrip_failures == 0,
          format("1000 tensors: %ld roundtrip failures, %ld index-formula mismatches", static_cast<long>(roundtrip_failures),
                 static_cast<long>(mismatches))};
}

// 3. Zeroing each group's inputs changes no other group's outputs.
Outcome group_isolation() {
  fu::Rng rng(3003);
  Index violations = 0, groups_tested = 0;
  for (Index C : {4, 8, 64}) {
    for (bool down : {true, false}) {
      const Index in = down ? 4 * C : 2 * C, out = down ? 2 * C : 4 * C;
      const Index in_per = in / C, out_per = out / C;
      auto conv = fu::make_conv<double>(in, out, 3, 1, C, rng);
      conv.bias = random_tensor({out}, rng);
      const auto x = random_tensor({2, in, 5, 5}, rng);
      auto apply = [&](const fu::Tensor<double>& t) {
        return down ? fu::group_fuse_down(t, conv) : fu::group_fuse_up(t, conv);
      };
      const auto base = apply(x);
      for (Index g = 0; g < C; ++g) {
        fu::Vector<double> v = x.value();
        for (Index n = 0; n < 2; ++n) v.segment((n * in + g * in_per) * 25, in_per * 25).setZero();
        const auto y = apply(fu::Tensor<double>(x.shape(), v));
        for (Index n = 0; n < 2; ++n)
          for (Index c = 0; c < out; ++c)
            for (Index p = 0; p < 25; ++p) {
              const Index k = (n * out + c) * 25 + p;
              const bool own = c / out_per == g;
              const double expected = own ? conv.bias->value()[c] : base.value()[k];
              if (y.value()[k] != expected) ++violations;
            }
        ++groups_tested;
      }
    }
  }
  return {violations == 0, format("%ld groups zeroed at C in {4, 8, 64}, down and up: %ld cross-group changes",
                                  static_cast<long>(groups_tested), static_cast<long>(violations))};
}

// 4. Who can reach whom through one FuseBlock.
Outcome schedule_reachability() {
  fu::Rng rng(4004);
  const Index C = 4, S = 16;
  fu::FeaturePyramid<double> base;
  for (Index i = 0; i < 4; ++i) base.levels[static_cast<std::size_t>(i)] = random_tensor({2, C << i, S >> i, S >> i}, rng);
  base.bottleneck = random_tensor({2, C << 4, 1, 1}, rng);

  auto both = fu::FuseBlock<double>::make(C, fu::FusionMode::both, fu::ResampleMode::reorganize_groupconv, rng);
  const auto ref = fu::fuse_block_forward(base, both, fu::Mode::eval);
  Index reached = 0;
  std::string missing;
  for (std::size_t b = 0; b < 4; ++b) {
    auto perturbed = base;
    fu::Vector<double> v = base.levels[b].value();
    v.array() += 1e-3 * random_tensor(base.levels[b].shape(), rng).value().array();
    perturbed.levels[b] = fu::Tensor<double>(base.levels[b].shape(), v);
    const auto out = fu::fuse_block_forward(perturbed, both, fu::Mode::eval);
    for (std::size_t a = 0; a < 4; ++a) {
      const double sensitivity = (out.levels[a].value() - ref.levels[a].value()).cwiseAbs().maxCoeff();
      if (sensitivity > 0) {
        ++reached;
      } else {
        missing += format(" T%zu->T%zu", b + 1, a + 1);
      }
    }
  }
  auto down = fu::FuseBlock<double>::make(C, fu::FusionMode::down_only, fu::ResampleMode::reorganize_groupconv, rng);
  auto up = fu::FuseBlock<double>::make(C, fu::FusionMode::up_only, fu::ResampleMode::reorganize_groupconv, rng);
  const bool t1_kept = bitwise_equal(fu::fuse_block_forward(base, down, fu::Mode::eval).levels[0], base.levels[0]);
  const bool t4_kept = bitwise_equal(fu::fuse_block_forward(base, up, fu::Mode::eval).levels[3], base.levels[3]);
  return {reached == 16 && t1_kept && t4_kept,
          format("both: %ld/16 pairs sensitive%s; down_only T1 identical: %s; up_only T4 identical: %s",
                 static_cast<long>(reached), missing.c_str(), t1_kept ? "yes" : "no", t4_kept ? "yes" : "no")};
}

// 5. Parameter and FLOP counts against the published full-scale figures.
Outcome cost_accounting() {
  fu::FusionConfig config;
  const Shape input{1, 3, 224, 224};
  const auto grouped = fu::count_cost(config, input);
  config.resample_mode = fu::ResampleMode::pool_conv;
  const auto pooled = fu::count_cost(config, input);
  const double params_lo = 25.80e6 * 0.8, params_hi = 25.80e6 * 1.2;
  const double flops_lo = 55.95e9 * 0.75, flops_hi = 55.95e9 * 1.25;
  const bool params_ok = grouped.params >= params_lo && grouped.params <= params_hi;
  const bool flops_ok = grouped.flops >= flops_lo && grouped.flops <= flops_hi;
  const bool ordering = pooled.params > grouped.params && pooled.flops > grouped.flops;
  return {params_ok && flops_ok && ordering,
          format("params %.2fM in [%.2fM, %.2fM]: %s; FLOPs %.2fG in [%.2fG, %.2fG]: %s (MACs %.2fG); "
                 "pool_conv %.2fM / %.2fG strictly larger: %s",
                 grouped.params / 1e6, params_lo / 1e6, params_hi / 1e6, params_ok ? "yes" : "no", grouped.flops / 1e9,
                 flops_lo / 1e9, flops_hi / 1e9, flops_ok ? "yes" : "no", grouped.macs / 1e9, pooled.params / 1e6,
                 pooled.flops / 1e9, ordering ? "yes" : "no")};
}

// 6. Desk-scale training reaches the Dice floor in time.
Outcome desk_learning(const std::filesystem::path& work) {
  const fu::ExperimentConfig config = fu::ExperimentConfig::desk();
  const auto data = fu::make_datasets(config.data, config.model.n_classes);
  const double start = cpu_seconds();
  const auto report = fu::train_any(config, data, work / "desk");
  const double elapsed = cpu_seconds() - start;
  const bool ok = report.best_val_dice >= 0.85 && elapsed < 1200.0;
  return {ok, format("C=16 S=64 nuclei 200/50, 30 epochs, both: val Dice %.4f >= 0.85 (best epoch %ld), %.0f s CPU < 1200 s",
                     report.best_val_dice, static_cast<long>(report.best_epoch), elapsed)};
}

// 7. Ablation orderings over five seeds.
Outcome ablation_direction(const std::filesystem::path& work) {
  const fu::ExperimentConfig config = fu::ExperimentConfig::desk();
  const auto table = fu::run_ablation(config, 5, work / "ablation", [](const std::string& arm, Index i, const fu::RunReport& r) {
    std::printf("  ablation %-10s seed %ld: Dice %.4f\n", arm.c_str(), static_cast<long>(i), r.final.dice);
    std::fflush(stdout);
  });
  const auto& both = table.row("DownFuse + UpFuse");
  const auto& none = table.row("No Fusion");
  const auto& reorg = table.row("Reorganize+Group-Conv");
  const auto& pool = table.row("Pooling+Conv");
  const double gain = both.dice_mean - none.dice_mean;
  const bool fusion_ok = gain >= 0.005;
  const bool resample_ok = reorg.dice_mean >= pool.dice_mean;
  std::string rows;
  for (const auto& r : table.fusion_rows) rows += format(" %s %.4f+-%.4f;", r.name.c_str(), r.dice_mean, r.dice_std);
  for (const auto& r : table.resample_rows) rows += format(" %s %.4f+-%.4f;", r.name.c_str(), r.dice_mean, r.dice_std);
  return {fusion_ok && resample_ok,
          format("5 seeds; both - none = %+.4f >= 0.005: %s; reorganize %.4f >= pool_conv %.4f: %s;", gain,
                 fusion_ok ? "yes" : "no", reorg.dice_mean, pool.dice_mean, resample_ok ? "yes" : "no") +
              rows};
}

// 8. Two identical runs write identical bytes.
Outcome determinism(const std::filesystem::path& work) {
  fu::ExperimentConfig config = fu::ExperimentConfig::desk();
  config.data.n_train = 24;
  config.data.n_val = 8;
  config.train.epochs = 3;
  const auto data = fu::make_datasets(config.data, config.model.n_classes);
  fu::train_any(config, data, work / "determinism_a");
  fu::train_any(config, data, work / "determinism_b");
  auto bytes = [](const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
  };
  bool ok = true;
  std::string detail = "desk model, 24/8 samples, 3 epochs, seed 1:";
  for (const char* file : {"metrics.csv", "best.funw", "report.json"}) {
    const std::string a = bytes(work / "determinism_a" / file), b = bytes(work / "determinism_b" / file);
    const bool same = !a.empty() && a == b;
    ok = ok && same;
    detail += format(" %s %s (%zu bytes);", file, same ? "identical" : "DIFFERS", a.size());
  }
  return {ok, detail};
}

// 9. Per-class IoU = Dice / (2 - Dice) on random mask pairs.
Outcome metric_identity() {
  fu::Rng rng(9009);
  Index classes_checked = 0, rational_failures = 0, float_failures = 0;
  double worst = 0.0;
  for (int t = 0; t < 1000; ++t) {
    const Index K = fu::uniform_int(rng, 2, 4), H = fu::uniform_int(rng, 1, 12), W = fu::uniform_int(rng, 1, 12);
    fu::LabelMap a(H, W), b(H, W);
    const double bias = fu::uniform01(rng);
    for (Index i = 0; i < H * W; ++i) {
      a.labels[static_cast<std::size_t>(i)] = static_cast<std::int32_t>(fu::uniform_int(rng, 0, K - 1));
      b.labels[static_cast<std::size_t>(i)] = fu::uniform01(rng) < bias ? a.labels[static_cast<std::size_t>(i)]
                                                                        : static_cast<std::int32_t>(fu::uniform_int(rng, 0, K - 1));
    }
    for (const auto& o : fu::class_overlaps(a, b, K)) {
      ++classes_checked;
      // IoU = I / (P + A - I) and Dice / (2 - Dice) = 2I / (2(P + A) - 2I): equal as fractions.
      const std::int64_t I = o.intersection, S = o.predicted + o.actual;
      if (S > 0 && I * (2 * S - 2 * I) != 2 * I * (S - I)) ++rational_failures;
      const double d = o.dice(), iou = o.iou();
      const double err = std::abs(iou - d / (2.0 - d));
      worst = std::max(worst, err);
      if (err > 4 * std::numeric_limits<double>::epsilon()) ++float_failures;
    }
  }
  return {rational_failures == 0 && float_failures == 0,
          format("1000 mask pairs, %ld class overlaps: exact in integer arithmetic (%ld failures); "
                 "reported doubles agree to %.1e (%ld beyond 4 ulp)",
                 static_cast<long>(classes_checked), static_cast<long>(rational_failures), worst,
                 static_cast<long>(float_failures))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"FusionU-Net acceptance checks"};
  int only = 0;
  std::string work = (std::filesystem::temp_directory_path() / "fusionunet_acceptance").string();
  app.add_option("--only", only, "run a single criterion (1-9)")->check(CLI::Range(1, 9));
  app.add_option("--work-dir", work, "scratch directory for training runs");
  CLI11_PARSE(app, argc, argv);

  const std::filesystem::path dir(work);
  const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient audit", gradient_audit},
      {"reorganize bijection", reorganize_bijection},
      {"group isolation", group_isolation},
      {"schedule reachability", schedule_reachability},
      {"cost accounting", cost_accounting},
      {"desk-scale learning", [&] { return desk_learning(dir); }},
      {"ablation direction", [&] { return ablation_direction(dir); }},
      {"determinism", [&] { return determinism(dir); }},
      {"metric identity", metric_identity},
  };

  bool all = true;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (only != 0 && static_cast<std::size_t>(only) != i + 1) continue;
    Outcome outcome;
    try {
      outcome = criteria[i].second();
    } catch (const std::exception& e) {
      outcome = {false, std::string("exception: ") + e.what()};
    }
    all = all && outcome.passed;
    std::printf("criterion %zu %s  %s: %s\n", i + 1, outcome.passed ? "PASS" : "FAIL", criteria[i].first.c_str(),
                outcome.detail.c_str());
    std::fflush(stdout);
  }
  return all ? 0 : 1;
}
