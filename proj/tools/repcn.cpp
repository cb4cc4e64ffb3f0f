// repcn command-line pipeline: data generation, training, fusion,
// verification, sampling and cost accounting.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "repcn/repcn.hpp"

namespace fs = std::filesystem;
using namespace repcn;

namespace {

// Exit codes: 0 success, 1 verification failed, 2 bad input or usage.
constexpr int kFailed = 1;
constexpr int kBadInput = 2;

struct TrainFlags {
  std::uint64_t steps = 1000;
  std::uint64_t seed = 0;
  double lr = 1e-3;
  std::uint64_t dataset_size = 256;
  std::uint64_t batch = 16;
  std::uint64_t log_every = 100;
  std::string out;
};

void add_train_flags(CLI::App* cmd, TrainFlags& f) {
  cmd->add_option("--steps", f.steps, "optimizer steps")->capture_default_str();
  cmd->add_option("--seed", f.seed, "seed for data, init and minibatches")->capture_default_str();
  cmd->add_option("--lr", f.lr, "Adam learning rate")->capture_default_str();
  cmd->add_option("--dataset-size", f.dataset_size, "synthetic training pairs")
      ->capture_default_str();
  cmd->add_option("--batch", f.batch, "minibatch size")->capture_default_str()
      ->check(CLI::PositiveNumber);
  cmd->add_option("--log-every", f.log_every, "print the loss every N steps (0: never)")
      ->capture_default_str();
  cmd->add_option("--out", f.out, "output checkpoint")->required();
}

TrainConfig train_config(const TrainFlags& f) {
  TrainConfig cfg;
  cfg.steps = f.steps;
  cfg.batch = f.batch;
  cfg.seed = f.seed;
  cfg.adam.lr = f.lr;
  cfg.log_every = f.log_every;
  cfg.log = [](std::size_t step, double loss) {
    std::fprintf(stderr, "step %zu loss %.5f\n", step, loss);
  };
  return cfg;
}

RunConfig run_config(const TrainFlags& f, const RunConfig& parent) {
  RunConfig run = parent;
  run.seed = f.seed;
  run.steps = f.steps;
  run.lr = f.lr;
  run.dataset_size = f.dataset_size;
  run.batch = f.batch;
  return run;
}

NoiseSchedule schedule_for(const RunConfig& run, const ModelConfig& model) {
  DiffusionConfig d;
  d.timesteps = run.timesteps;
  d.image_size = model.image_size;
  d.image_channels = model.image_channels;
  d.condition_channels = model.condition_channels;
  return NoiseSchedule{d};
}

Checkpoint<float> load(const std::string& path) { return load_checkpoint<float>(fs::path(path)); }

int cmd_gen_data(std::size_t n, std::size_t size, std::uint64_t seed, bool held_out,
                 const std::string& out) {
  fs::create_directories(out);
  const auto data = make_dataset(n, seed, size, held_out);
  std::ofstream index(fs::path(out) / "index.csv");
  index << "index,kind,caption,condition,target\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%05zu", i);
    const std::string cond = std::string("cond_") + stem + ".pgm";
    const std::string target = std::string("target_") + stem + ".pgm";
    write_pgm(fs::path(out) / cond, mask_to_gray(data[i].condition.data(), size, size));
    write_pgm(fs::path(out) / target, image_to_gray(data[i].target.data(), size, size));
    index << i << ',' << shape_kind_name(data[i].kind) << ',' << data[i].caption << ',' << cond
          << ',' << target << '\n';
  }
  if (!index) throw FormatError("failed to write index.csv");
  std::printf("wrote %zu pairs to %s\n", n, out.c_str());
  return 0;
}

int cmd_pretrain(const TrainFlags& f, std::size_t image_size, std::size_t timesteps) {
  ModelConfig model;
  model.image_size = image_size;
  model.validate();
  RunConfig run;
  run.image_size = image_size;
  run.timesteps = timesteps;
  run = run_config(f, run);
  const auto schedule = schedule_for(run, model);
  const auto data = make_dataset(f.dataset_size, f.seed, image_size);
  auto base = pretrain_base<float>(model, data, schedule, train_config(f));
  save_checkpoint(fs::path(f.out), base, run);
  std::printf("saved base (%llu params) to %s\n",
              static_cast<unsigned long long>(count_params(base)), f.out.c_str());
  return 0;
}

int cmd_train_rep(const TrainFlags& f, const std::string& base_path, const RepOptions& options) {
  const auto base = load(base_path);
  RunConfig run = run_config(f, base.run);
  run.w = options.w;
  const auto schedule = schedule_for(run, base.model.config);
  const auto data = make_dataset(f.dataset_size, f.seed, base.model.config.image_size);
  auto dual = train_rep(base.model, data, schedule, options, train_config(f));
  save_checkpoint(fs::path(f.out), dual, run);
  std::printf("saved dual (%llu params) to %s\n",
              static_cast<unsigned long long>(count_params(dual)), f.out.c_str());
  return 0;
}

int cmd_train_controlnet(const TrainFlags& f, const std::string& base_path) {
  const auto base = load(base_path);
  const RunConfig run = run_config(f, base.run);
  const auto schedule = schedule_for(run, base.model.config);
  const auto data = make_dataset(f.dataset_size, f.seed, base.model.config.image_size);
  auto cn = train_controlnet(base.model, data, schedule, train_config(f));
  save_checkpoint(fs::path(f.out), cn, run);
  std::printf("saved controlnet (%llu params) to %s\n",
              static_cast<unsigned long long>(count_params(cn)), f.out.c_str());
  return 0;
}

int cmd_fuse(const std::string& in, const FusionConfig& fusion, const std::string& out) {
  const auto dual = load(in);
  auto fused = fuse_model(dual.model, fusion);
  RunConfig run = dual.run;
  run.alpha = fusion.alpha;
  run.beta = fusion.beta;
  save_checkpoint(fs::path(out), fused, run);
  std::printf("fused %s (alpha %g, beta %g) into %s\n", in.c_str(), fusion.alpha, fusion.beta,
              out.c_str());
  return 0;
}

int cmd_verify(const std::string& dual_path, const std::string& fused_path, std::size_t samples,
               double tol, std::uint64_t seed) {
  const auto dual = load(dual_path);
  const auto fused = load(fused_path);
  const auto report =
      verify_equivalence(dual.model, fused.model, samples, tol, seed, dual.run.timesteps);
  std::printf("samples %zu  max_abs %.3e  max_rel %.3e  tol %.1e  %s\n", report.samples,
              report.worst_abs(), report.worst_rel(), tol, report.passed ? "PASS" : "FAIL");
  return report.passed ? 0 : kFailed;
}

int cmd_sample(const std::string& model_path, const std::string& condition, std::size_t caption,
               std::optional<std::size_t> identity, std::size_t steps, std::uint64_t seed,
               const std::string& out) {
  const auto ck = load(model_path);
  const auto& cfg = ck.model.config;
  SampleRequest<float> req;
  req.batch = 1;
  req.captions = {caption};
  req.identities = {identity.value_or(caption)};
  req.steps = steps;
  req.seed = seed;
  if (caption >= cfg.num_captions) {
    throw ContractError("--caption must be below " + std::to_string(cfg.num_captions));
  }
  const bool conditioned = ck.model.parts.adapter || ck.model.parts.control;
  if (conditioned && condition.empty()) {
    throw ContractError(std::string(variant_name(ck.model.variant())) +
                        " model needs --condition");
  }
  if (!condition.empty()) {
    const GrayImage img = read_pgm(fs::path(condition));
    if (img.width != cfg.image_size || img.height != cfg.image_size) {
      throw ShapeError("condition image '" + condition + "' is " + std::to_string(img.width) +
                       "x" + std::to_string(img.height) + ", model expects " +
                       std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    }
    Tensor<float> mask = gray_to_mask(img);
    req.condition = Tensor<float>({1, 1, cfg.image_size, cfg.image_size},
                                  std::vector<float>(mask.data().begin(), mask.data().end()));
  }
  const auto image = sample(ck.model, schedule_for(ck.run, cfg), req);
  write_pgm(fs::path(out), image_to_gray(image.data(), cfg.image_size, cfg.image_size));
  std::printf("wrote %s\n", out.c_str());
  return 0;
}

int cmd_count(const std::string& model_path, std::size_t batch, const std::string& csv) {
  const auto ck = load(model_path);
  const auto& c = ck.model.config;
  const auto report = count_flops(ck.model, {batch, c.image_channels, c.image_size, c.image_size});
  std::printf("%s  params %llu  flops %llu  macs %llu\n", report.variant.c_str(),
              static_cast<unsigned long long>(report.total_params()),
              static_cast<unsigned long long>(report.total_flops()),
              static_cast<unsigned long long>(report.total_macs()));
  for (auto role : {LayerRole::base, LayerRole::adapter, LayerRole::identity, LayerRole::control}) {
    const auto n = count_params(ck.model, role);
    if (n) std::printf("  %-9s %llu\n", layer_role_name(role), static_cast<unsigned long long>(n));
  }
  if (!csv.empty()) {
    std::ofstream out(csv);
    write_csv(out, report);
    if (!out) throw FormatError("cannot write '" + csv + "'");
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"RepControlNet toy pipeline"};
  app.require_subcommand(1);

  std::size_t n = 64, size = 16;
  std::uint64_t data_seed = 0;
  bool held_out = false;
  std::string data_out;
  auto* gen = app.add_subcommand("gen-data", "write synthetic condition/target PGM pairs");
  gen->add_option("--n", n, "number of pairs")->capture_default_str();
  gen->add_option("--size", size, "image side")->capture_default_str();
  gen->add_option("--seed", data_seed, "dataset seed")->capture_default_str();
  gen->add_flag("--held-out", held_out, "use the held-out seed range");
  gen->add_option("--out", data_out, "output directory")->required();

  TrainFlags pre_flags;
  pre_flags.steps = 2000;
  std::size_t image_size = 16, timesteps = 200;
  auto* pre = app.add_subcommand("pretrain", "train a base model and freeze it");
  add_train_flags(pre, pre_flags);
  pre->add_option("--image-size", image_size, "image side")->capture_default_str();
  pre->add_option("--timesteps", timesteps, "diffusion steps T")->capture_default_str();

  TrainFlags rep_flags;
  rep_flags.steps = 3000;
  rep_flags.dataset_size = 4096;
  std::string base_path;
  RepOptions rep;
  bool no_adapter = false, no_identity = false;
  auto* train_rep_cmd = app.add_subcommand("train-rep", "train modal copies on a frozen base");
  add_train_flags(train_rep_cmd, rep_flags);
  train_rep_cmd->add_option("--base", base_path, "frozen base checkpoint")->required();
  train_rep_cmd->add_option("--w", rep.w, "modal copy ratio")->capture_default_str();
  train_rep_cmd->add_flag("--no-adapter", no_adapter, "omit the condition adapter");
  train_rep_cmd->add_flag("--no-identity", no_identity, "omit identity K/V projections");
  std::string adapter_site = "features";
  train_rep_cmd->add_option("--adapter-site", adapter_site, "where the adapter output is added")
      ->capture_default_str()
      ->check(CLI::IsMember({"input", "features"}));
  train_rep_cmd->add_option("--adapter-width", rep.adapter_channels, "adapter hidden channels")
      ->capture_default_str()
      ->check(CLI::PositiveNumber);

  TrainFlags cn_flags;
  cn_flags.steps = 3000;
  cn_flags.dataset_size = 4096;
  std::string cn_base;
  auto* train_cn = app.add_subcommand("train-controlnet", "train a ControlNet branch");
  add_train_flags(train_cn, cn_flags);
  train_cn->add_option("--base", cn_base, "frozen base checkpoint")->required();

  std::string fuse_in, fuse_out;
  FusionConfig fusion;
  auto* fuse = app.add_subcommand("fuse", "merge modal copies into single-branch weights");
  fuse->add_option("--in", fuse_in, "dual checkpoint")->required();
  fuse->add_option("--alpha", fusion.alpha, "weight of the original branch")->capture_default_str();
  fuse->add_option("--beta", fusion.beta, "weight of the modal branch")->capture_default_str();
  fuse->add_option("--out", fuse_out, "fused checkpoint")->required();

  std::string v_dual, v_fused;
  std::size_t v_samples = 20;
  double v_tol = 1e-4;
  std::uint64_t v_seed = 0;
  auto* verify = app.add_subcommand("verify", "compare dual and fused forwards");
  verify->add_option("--dual", v_dual, "dual checkpoint")->required();
  verify->add_option("--fused", v_fused, "fused checkpoint")->required();
  verify->add_option("--samples", v_samples, "random inputs")->capture_default_str()
      ->check(CLI::PositiveNumber);
  verify->add_option("--tol", v_tol, "max relative difference")->capture_default_str()
      ->check(CLI::NonNegativeNumber);
  verify->add_option("--seed", v_seed, "input seed")->capture_default_str();

  std::string s_model, s_cond, s_out;
  std::size_t s_caption = 0, s_steps = 200;
  std::optional<std::size_t> s_identity;
  std::uint64_t s_seed = 0;
  auto* samp = app.add_subcommand("sample", "generate one image");
  samp->add_option("--model", s_model, "checkpoint")->required();
  samp->add_option("--condition", s_cond, "edge map PGM");
  samp->add_option("--caption", s_caption, "caption id")->capture_default_str();
  samp->add_option("--identity", s_identity, "identity id (defaults to the caption)");
  samp->add_option("--steps", s_steps, "sampling steps")->capture_default_str();
  samp->add_option("--seed", s_seed, "noise seed")->capture_default_str();
  samp->add_option("--out", s_out, "output PGM")->required();

  std::string c_model, c_csv;
  std::size_t c_batch = 1;
  auto* count = app.add_subcommand("count", "parameter and FLOP report");
  count->add_option("--model", c_model, "checkpoint")->required();
  count->add_option("--batch", c_batch, "batch size")->capture_default_str()
      ->check(CLI::PositiveNumber);
  count->add_option("--csv", c_csv, "write the per-layer report here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kBadInput;
  }

  try {
    if (*gen) return cmd_gen_data(n, size, data_seed, held_out, data_out);
    if (*pre) return cmd_pretrain(pre_flags, image_size, timesteps);
    if (*train_rep_cmd) {
      rep.adapter = !no_adapter;
      rep.identity = !no_identity;
      rep.adapter_site = parse_adapter_site(adapter_site);
      rep.seed = rep_flags.seed;
      return cmd_train_rep(rep_flags, base_path, rep);
    }
    if (*train_cn) return cmd_train_controlnet(cn_flags, cn_base);
    if (*fuse) return cmd_fuse(fuse_in, fusion, fuse_out);
    if (*verify) return cmd_verify(v_dual, v_fused, v_samples, v_tol, v_seed);
    if (*samp) return cmd_sample(s_model, s_cond, s_caption, s_identity, s_steps, s_seed, s_out);
    if (*count) return cmd_count(c_model, c_batch, c_csv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kBadInput;
  }
  return kBadInput;
}
