#include "fusionunet/data.hpp"

#include "json.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>

namespace fusionunet {

namespace {

struct Netpbm {
  int channels = 0;  // 1 for P5, 3 for P6
  Index width = 0, height = 0;
  int maxval = 0;
  std::vector<unsigned char> bytes;
};

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageFormatError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

// Header tokens are separated by whitespace; '#' starts a comment to end of line.
Index header_number(const std::vector<unsigned char>& buf, std::size_t& pos, const std::string& what) {
  for (;;) {
    while (pos < buf.size() && std::isspace(buf[pos])) ++pos;
    if (pos < buf.size() && buf[pos] == '#') {
      while (pos < buf.size() && buf[pos] != '\n') ++pos;
      continue;
    }
    break;
  }
  if (pos >= buf.size() || !std::isdigit(buf[pos])) throw ImageFormatError("malformed netpbm header: expected " + what);
  Index value = 0;
  while (pos < buf.size() && std::isdigit(buf[pos])) {
    value = value * 10 + (buf[pos++] - '0');
    if (value > (1 << 24)) throw ImageFormatError("netpbm " + what + " too large");
  }
  return value;
}

Netpbm parse_netpbm(const std::filesystem::path& path) {
  const auto buf = read_file(path);
  if (buf.size() < 2 || buf[0] != 'P' || (buf[1] != '5' && buf[1] != '6')) {
    throw ImageFormatError(path.string() + ": not a binary PGM/PPM file");
  }
  Netpbm img;
  img.channels = buf[1] == '6' ? 3 : 1;
  std::size_t pos = 2;
  img.width = header_number(buf, pos, "width");
  img.height = header_number(buf, pos, "height");
  img.maxval = static_cast<int>(header_number(buf, pos, "maxval"));
  if (img.width < 1 || img.height < 1) throw ImageFormatError(path.string() + ": empty image");
  if (img.maxval < 1 || img.maxval > 255) {
    throw ImageFormatError(path.string() + ": unsupported maxval " + std::to_string(img.maxval));
  }
  if (pos >= buf.size() || !std::isspace(buf[pos])) throw ImageFormatError(path.string() + ": malformed header");
  ++pos;
  const auto expected = static_cast<std::size_t>(img.width * img.height * img.channels);
  if (buf.size() - pos < expected) throw ImageFormatError(path.string() + ": truncated pixel data");
  if (buf.size() - pos > expected) throw ImageFormatError(path.string() + ": trailing bytes after pixel data");
  img.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(pos), buf.end());
  return img;
}

void write_netpbm(const std::filesystem::path& path, char kind, Index width, Index height,
                  const std::vector<unsigned char>& bytes) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageFormatError("cannot open " + path.string() + " for writing");
  out << 'P' << kind << '\n' << width << ' ' << height << "\n255\n";
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageFormatError("failed writing " + path.string());
}

std::string numbered(Index i, const char* ext) {
  char name[32];
  std::snprintf(name, sizeof name, "%04ld.%s", static_cast<long>(i), ext);
  return name;
}

}  // namespace

void write_image(const Tensor<float>& image, const std::filesystem::path& path) {
  if (image.rank() != 3 || (image.dim(0) != 1 && image.dim(0) != 3)) {
    throw std::invalid_argument("write_image expects a 1 x H x W or 3 x H x W tensor");
  }
  const Index C = image.dim(0), H = image.dim(1), W = image.dim(2);
  std::vector<unsigned char> bytes(static_cast<std::size_t>(C * H * W));
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      for (Index c = 0; c < C; ++c) {
        const double v = std::clamp(static_cast<double>(image.data()[(c * H + y) * W + x]), 0.0, 1.0);
        bytes[static_cast<std::size_t>((y * W + x) * C + c)] = static_cast<unsigned char>(std::lround(v * 255.0));
      }
    }
  }
  write_netpbm(path, C == 3 ? '6' : '5', W, H, bytes);
}

Tensor<float> read_image(const std::filesystem::path& path) {
  const Netpbm img = parse_netpbm(path);
  const Index C = img.channels, H = img.height, W = img.width;
  Vector<float> values(C * H * W);
  for (Index y = 0; y < H; ++y) {
    for (Index x = 0; x < W; ++x) {
      for (Index c = 0; c < C; ++c) {
        const auto byte = img.bytes[static_cast<std::size_t>((y * W + x) * C + c)];
        if (byte > img.maxval) throw ImageFormatError(path.string() + ": sample exceeds maxval");
        values[(c * H + y) * W + x] = static_cast<float>(static_cast<double>(byte) / img.maxval);
      }
    }
  }
  return Tensor<float>({C, H, W}, std::move(values));
}

void write_mask(const LabelMap& mask, const std::filesystem::path& path) {
  std::vector<unsigned char> bytes(mask.labels.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const auto label = mask.labels[i];
    if (label < 0 || label > 255) throw std::invalid_argument("mask label does not fit in 8 bits");
    bytes[i] = static_cast<unsigned char>(label);
  }
  write_netpbm(path, '5', mask.width, mask.height, bytes);
}

LabelMap read_mask(const std::filesystem::path& path, Index n_classes) {
  const Netpbm img = parse_netpbm(path);
  if (img.channels != 1) throw ImageFormatError(path.string() + ": masks must be single-channel PGM");
  LabelMap mask(img.height, img.width);
  for (std::size_t i = 0; i < img.bytes.size(); ++i) {
    const int label = img.bytes[i];
    if (label > img.maxval) throw ImageFormatError(path.string() + ": sample exceeds maxval");
    if (label >= n_classes) {
      throw ImageFormatError(path.string() + ": label " + std::to_string(label) + " >= n_classes " +
                             std::to_string(n_classes));
    }
    mask.labels[i] = label;
  }
  return mask;
}

std::uint64_t file_checksum(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  return hash_label(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

void save_dataset(std::span<const SegSample> samples, const SynthSpec& spec, Index n_classes,
                  const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "images");
  std::filesystem::create_directories(dir / "masks");
  nlohmann::ordered_json manifest;
  manifest["spec"] = nlohmann::ordered_json::parse(spec.to_json());
  manifest["n_classes"] = n_classes;
  manifest["count"] = samples.size();
  auto& entries = manifest["samples"] = nlohmann::ordered_json::array();
  for (std::size_t i = 0; i < samples.size(); ++i) {
    validate_sample(samples[i], n_classes);
    const std::string image = "images/" + numbered(static_cast<Index>(i), samples[i].channels() == 3 ? "ppm" : "pgm");
    const std::string mask = "masks/" + numbered(static_cast<Index>(i), "pgm");
    write_image(samples[i].image, dir / image);
    write_mask(samples[i].mask, dir / mask);
    nlohmann::ordered_json e;
    e["image"] = image;
    e["mask"] = mask;
    e["image_fnv1a"] = file_checksum(dir / image);
    e["mask_fnv1a"] = file_checksum(dir / mask);
    entries.push_back(std::move(e));
  }
  std::ofstream out(dir / "manifest.json");
  out << manifest.dump(2) << '\n';
  if (!out) throw ImageFormatError("failed writing manifest in " + dir.string());
}

std::vector<SegSample> load_dataset(const std::filesystem::path& dir, Index n_classes) {
  std::ifstream in(dir / "manifest.json");
  if (!in) throw ImageFormatError("no manifest.json in " + dir.string());
  nlohmann::json manifest;
  try {
    manifest = nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw ImageFormatError("invalid manifest.json: " + std::string(e.what()));
  }
  const Index stored_classes = manifest.value("n_classes", n_classes);
  if (stored_classes > n_classes) {
    throw ImageFormatError("dataset has " + std::to_string(stored_classes) + " classes, model expects " +
                           std::to_string(n_classes));
  }
  std::vector<SegSample> out;
  for (const auto& e : manifest.at("samples")) {
    const auto image = dir / e.at("image").get<std::string>();
    const auto mask = dir / e.at("mask").get<std::string>();
    if (file_checksum(image) != e.at("image_fnv1a").get<std::uint64_t>() ||
        file_checksum(mask) != e.at("mask_fnv1a").get<std::uint64_t>()) {
      throw ImageFormatError("checksum mismatch for " + image.string());
    }
    SegSample s{read_image(image), read_mask(mask, n_classes)};
    validate_sample(s, n_classes);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace fusionunet
