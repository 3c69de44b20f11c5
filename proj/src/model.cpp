#include "fusionunet/model.hpp"

#include "json.hpp"

#include <fstream>
#include <set>

namespace fusionunet {

std::string_view to_string(Precision p) { return p == Precision::f64 ? "f64" : "f32"; }

Precision parse_precision(std::string_view text) {
  if (text == "f32") return Precision::f32;
  if (text == "f64") return Precision::f64;
  throw std::invalid_argument("unknown precision '" + std::string(text) + "'");
}

void FusionConfig::validate() const {
  if (in_channels < 1) throw std::invalid_argument("in_channels must be positive");
  if (n_classes < 2) throw std::invalid_argument("n_classes must be at least 2");
  if (base_width < 4 || base_width % 4 != 0) throw std::invalid_argument("base_width must be >= 4 and divisible by 4");
  if (input_side < 16 || input_side % 16 != 0) throw std::invalid_argument("input_side must be a positive multiple of 16");
  if (fuse_stack < 1) throw std::invalid_argument("fuse_stack must be positive");
}

std::string FusionConfig::to_json() const {
  nlohmann::ordered_json j;
  j["in_channels"] = in_channels;
  j["n_classes"] = n_classes;
  j["base_width"] = base_width;
  j["input_side"] = input_side;
  j["fusion_mode"] = std::string(fusionunet::to_string(fusion_mode));
  j["resample_mode"] = std::string(fusionunet::to_string(resample_mode));
  j["fuse_stack"] = fuse_stack;
  j["precision"] = std::string(fusionunet::to_string(precision));
  return j.dump();
}

FusionConfig FusionConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
  static const std::set<std::string> allowed{"in_channels", "n_classes",     "base_width", "input_side",
                                             "fusion_mode", "resample_mode", "fuse_stack", "precision"};
  for (const auto& item : j.items()) {
    if (!allowed.count(item.key())) throw std::invalid_argument("unknown key '" + item.key() + "' in model");
  }
  FusionConfig c;
  c.in_channels = j.value("in_channels", c.in_channels);
  c.n_classes = j.value("n_classes", c.n_classes);
  c.base_width = j.value("base_width", c.base_width);
  c.input_side = j.value("input_side", c.input_side);
  if (j.contains("fusion_mode")) c.fusion_mode = parse_fusion_mode(j["fusion_mode"].get<std::string>());
  if (j.contains("resample_mode")) c.resample_mode = parse_resample_mode(j["resample_mode"].get<std::string>());
  c.fuse_stack = j.value("fuse_stack", c.fuse_stack);
  if (j.contains("precision")) c.precision = parse_precision(j["precision"].get<std::string>());
  c.validate();
  return c;
}

template <typename Scalar>
FusionUNet<Scalar> FusionUNet<Scalar>::build(const FusionConfig& config, std::uint64_t seed) {
  config.validate();
  if (config.precision != (std::is_same_v<Scalar, double> ? Precision::f64 : Precision::f32)) {
    throw std::invalid_argument("config precision does not match the model scalar type");
  }
  Rng rng(seed);
  FusionUNet model;
  model.config_ = config;
  const Index C = config.base_width;
  model.stem_ = ConvBlock<Scalar>::make(config.in_channels, C, rng);
  for (Index i = 0; i < 4; ++i) model.down_.push_back(DownBlock<Scalar>::make(C << i, rng));
  for (Index b = 0; b < config.fuse_blocks(); ++b) {
    model.fusion_.push_back(FuseBlock<Scalar>::make(C, config.fusion_mode, config.resample_mode, rng));
  }
  // up_[0] consumes the bottleneck (16C) and T4 (8C); up_[3] ends at T1 (C).
  for (Index i = 0; i < 4; ++i) model.up_.push_back(UpBlock<Scalar>::make(C << (4 - i), C << (3 - i), rng));
  model.head_ = make_conv<Scalar>(C, config.n_classes, 1, 0, 1, rng);
  return model;
}

template <typename Scalar>
FeaturePyramid<Scalar> FusionUNet<Scalar>::encode(const Tensor<Scalar>& x, Mode mode) {
  const FusionConfig& c = config_;
  if (x.rank() != 4 || x.dim(1) != c.in_channels || x.dim(2) != c.input_side || x.dim(3) != c.input_side) {
    throw ShapeError("model expects N x " + std::to_string(c.in_channels) + " x " + std::to_string(c.input_side) +
                     " x " + std::to_string(c.input_side) + " input, got " + to_string(x.shape()));
  }
  FeaturePyramid<Scalar> p;
  p.levels[0] = conv_block_forward(x, stem_, mode);
  for (std::size_t i = 0; i < 3; ++i) p.levels[i + 1] = down_block_forward(p.levels[i], down_[i], mode);
  p.bottleneck = down_block_forward(p.levels[3], down_[3], mode);
  return p;
}

template <typename Scalar>
FeaturePyramid<Scalar> FusionUNet<Scalar>::fuse(const FeaturePyramid<Scalar>& pyramid, Mode mode) {
  return fusion_module_forward<Scalar>(pyramid, fusion_, mode);
}

template <typename Scalar>
Tensor<Scalar> FusionUNet<Scalar>::decode(const FeaturePyramid<Scalar>& pyramid, Mode mode) {
  Tensor<Scalar> y = pyramid.bottleneck;
  for (std::size_t i = 0; i < 4; ++i) y = up_block_forward(y, pyramid.levels[3 - i], up_[i], mode);
  return conv2d(y, head_);
}

template <typename Scalar>
Tensor<Scalar> FusionUNet<Scalar>::forward(const Tensor<Scalar>& x, Mode mode) {
  return decode(fuse(encode(x, mode), mode), mode);
}

template <typename Scalar>
ParamList<Scalar> FusionUNet<Scalar>::state() {
  ParamList<Scalar> out;
  collect("stem", stem_, out);
  for (std::size_t i = 0; i < down_.size(); ++i) collect("down." + std::to_string(i), down_[i], out);
  for (std::size_t i = 0; i < fusion_.size(); ++i) collect("fusion." + std::to_string(i), fusion_[i], out);
  for (std::size_t i = 0; i < up_.size(); ++i) collect("up." + std::to_string(i), up_[i], out);
  collect("head", head_, out);
  return out;
}

template <typename Scalar>
std::vector<Tensor<Scalar>> FusionUNet<Scalar>::trainable() {
  std::vector<Tensor<Scalar>> out;
  for (auto& p : state()) {
    if (p.trainable) out.push_back(p.tensor);
  }
  return out;
}

template <typename Scalar>
Index count_params(FusionUNet<Scalar>& model) {
  return count_trainable(model.state());
}

CostReport count_cost(const FusionConfig& config, const Shape& input_shape) {
  FusionConfig c = config;
  c.precision = Precision::f32;
  auto model = FusionUNet<float>::build(c, 0);
  CostReport report;
  report.params = count_params(model);
  detail::CostTally tally;
  detail::set_cost_tally(&tally);
  try {
    NoGradGuard no_grad;
    model.forward(Tensor<float>(input_shape, 0.0f), Mode::eval);
  } catch (...) {
    detail::set_cost_tally(nullptr);
    throw;
  }
  detail::set_cost_tally(nullptr);
  report.macs = tally.macs;
  report.flops = tally.flops;
  return report;
}

namespace {

constexpr char kCheckpointMagic[4] = {'F', 'U', 'N', 'W'};

FusionConfig read_header(std::istream& in) {
  char magic[4];
  io::read_exact(in, magic, 4);
  if (!std::equal(magic, magic + 4, kCheckpointMagic)) throw FormatError("not a checkpoint file (bad magic)");
  const std::uint32_t version = io::read_u32(in);
  if (version != kCheckpointVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  const std::uint64_t length = io::read_u64(in);
  if (length > (1u << 20)) throw FormatError("checkpoint config header too large");
  std::string text(length, '\0');
  io::read_exact(in, text.data(), length);
  try {
    return FusionConfig::from_json(text);
  } catch (const std::exception& e) {
    throw FormatError(std::string("invalid checkpoint config: ") + e.what());
  }
}

template <typename Scalar>
void read_tensors(std::istream& in, FusionUNet<Scalar>& model) {
  auto state = model.state();
  const std::uint64_t count = io::read_u64(in);
  if (count != state.size()) throw FormatError("checkpoint tensor count does not match the model");
  for (auto& entry : state) {
    Tensor<Scalar> stored = read_tensor<Scalar>(in);
    if (stored.shape() != entry.tensor.shape()) throw FormatError("checkpoint tensor " + entry.name + " has wrong shape");
    entry.tensor.mutable_value() = stored.value();
  }
  if (in.peek() != std::char_traits<char>::eof()) throw FormatError("trailing bytes after checkpoint");
}

}  // namespace

template <typename Scalar>
void save_checkpoint(FusionUNet<Scalar>& model, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw FormatError("cannot open " + path.string() + " for writing");
  out.write(kCheckpointMagic, 4);
  io::write_u32(out, kCheckpointVersion);
  const std::string config = model.config().to_json();
  io::write_u64(out, config.size());
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  auto state = model.state();
  io::write_u64(out, state.size());
  for (const auto& entry : state) write_tensor(out, entry.tensor);
  if (!out) throw FormatError("failed writing checkpoint " + path.string());
}

FusionConfig read_checkpoint_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  return read_header(in);
}

template <typename Scalar>
FusionUNet<Scalar> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const FusionConfig config = read_header(in);
  constexpr Precision wanted = std::is_same_v<Scalar, double> ? Precision::f64 : Precision::f32;
  if (config.precision != wanted) {
    throw FormatError(std::string("checkpoint precision ") + std::string(to_string(config.precision)) +
                      " cannot be loaded as " + std::string(to_string(wanted)));
  }
  auto model = FusionUNet<Scalar>::build(config, 0);
  read_tensors(in, model);
  return model;
}

template <typename Scalar>
void load_checkpoint_into(FusionUNet<Scalar>& model, const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  const FusionConfig config = read_header(in);
  if (!(config == model.config())) throw FormatError("checkpoint config does not match the model config");
  read_tensors(in, model);
}

template class FusionUNet<float>;
template class FusionUNet<double>;
template Index count_params(FusionUNet<float>&);
template Index count_params(FusionUNet<double>&);
template void save_checkpoint(FusionUNet<float>&, const std::filesystem::path&);
template void save_checkpoint(FusionUNet<double>&, const std::filesystem::path&);
template FusionUNet<float> load_checkpoint(const std::filesystem::path&);
template FusionUNet<double> load_checkpoint(const std::filesystem::path&);
template void load_checkpoint_into(FusionUNet<float>&, const std::filesystem::path&);
template void load_checkpoint_into(FusionUNet<double>&, const std::filesystem::path&);

}  // namespace fusionunet
