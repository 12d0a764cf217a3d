#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "odis/data.hpp"

namespace odis {

namespace fs = std::filesystem;

namespace {

std::vector<std::uint8_t> slurp(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

[[noreturn]] void malformed(const fs::path& path, std::size_t offset,
                            const std::string& what) {
  throw std::runtime_error(path.string() + ": " + what + " at byte " +
                           std::to_string(offset));
}

struct NetpbmHeader {
  std::size_t width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

// ASCII header: magic, whitespace, width, height, maxval, one whitespace byte.
NetpbmHeader parse_header(const fs::path& path, const std::vector<std::uint8_t>& bytes,
                          const char* magic) {
  if (bytes.size() < 2 || bytes[0] != magic[0] || bytes[1] != magic[1]) {
    malformed(path, 0, std::string("expected magic ") + magic);
  }
  std::size_t pos = 2;
  auto skip_space = [&] {
    bool any = false;
    while (pos < bytes.size()) {
      if (std::isspace(bytes[pos])) {
        ++pos;
        any = true;
      } else if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
        any = true;
      } else {
        break;
      }
    }
    if (!any) malformed(path, pos, "expected whitespace");
  };
  std::size_t start = 0;
  auto number = [&] {
    skip_space();
    start = pos;
    std::size_t v = 0;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) {
      v = v * 10 + (bytes[pos] - '0');
      if (v > (1u << 24)) malformed(path, start, "number too large");
      ++pos;
    }
    if (pos == start) malformed(path, start, "expected a decimal number");
    return v;
  };
  NetpbmHeader h;
  h.width = number();
  h.height = number();
  h.maxval = number();
  if (pos >= bytes.size() || !std::isspace(bytes[pos])) {
    malformed(path, pos, "expected single whitespace after maxval");
  }
  ++pos;
  if (h.width == 0 || h.height == 0) malformed(path, 2, "zero dimension");
  if (h.maxval != 255) malformed(path, start, "maxval must be 255");
  h.data_offset = pos;
  return h;
}

void write_bytes(const fs::path& path, const std::string& header,
                 const std::vector<std::uint8_t>& payload) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << header;
  os.write(reinterpret_cast<const char*>(payload.data()),
           static_cast<std::streamsize>(payload.size()));
  if (!os) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace

void write_ppm(const fs::path& path, const Tensor<float>& image) {
  if (image.rank() != 3 || image.dim(0) != 3) {
    throw std::invalid_argument("write_ppm: expected [3 x H x W] image");
  }
  const std::size_t h = image.dim(1), w = image.dim(2);
  std::vector<std::uint8_t> payload(h * w * 3);
  for (std::size_t i = 0; i < h * w; ++i)
    for (std::size_t c = 0; c < 3; ++c) {
      const float v = std::clamp(image[c * h * w + i], 0.0f, 1.0f);
      payload[i * 3 + c] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
    }
  write_bytes(path, "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n",
              payload);
}

Tensor<float> read_ppm(const fs::path& path) {
  const auto bytes = slurp(path);
  const NetpbmHeader h = parse_header(path, bytes, "P6");
  const std::size_t n = h.width * h.height;
  if (bytes.size() != h.data_offset + 3 * n) {
    malformed(path, std::min(bytes.size(), h.data_offset + 3 * n),
              "pixel payload size mismatch");
  }
  Tensor<float> image({3, h.height, h.width});
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < 3; ++c)
      image[c * n + i] = float(bytes[h.data_offset + i * 3 + c]) / 255.0f;
  return image;
}

void write_pgm(const fs::path& path, std::size_t width, std::size_t height,
               const std::vector<std::uint8_t>& pixels) {
  if (pixels.size() != width * height) {
    throw std::invalid_argument("write_pgm: pixel count mismatch");
  }
  write_bytes(path,
              "P5\n" + std::to_string(width) + " " + std::to_string(height) + "\n255\n",
              pixels);
}

std::vector<std::uint8_t> read_pgm(const fs::path& path, std::size_t& width,
                                   std::size_t& height) {
  const auto bytes = slurp(path);
  const NetpbmHeader h = parse_header(path, bytes, "P5");
  const std::size_t n = h.width * h.height;
  if (bytes.size() != h.data_offset + n) {
    malformed(path, std::min(bytes.size(), h.data_offset + n),
              "pixel payload size mismatch");
  }
  width = h.width;
  height = h.height;
  return std::vector<std::uint8_t>(bytes.begin() + static_cast<long>(h.data_offset),
                                   bytes.end());
}

std::string format_labels(const std::map<int, int>& labels) {
  std::string out;
  for (const auto& [inst, cls] : labels) {
    if (!out.empty()) out += ';';
    out += std::to_string(inst) + ":" + std::to_string(cls);
  }
  return out;
}

std::map<int, int> parse_labels(const std::string& text) {
  std::map<int, int> labels;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ';')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw std::runtime_error("bad label pair '" + item + "'");
    }
    try {
      std::size_t used = 0;
      const int inst = std::stoi(item.substr(0, colon), &used);
      const int cls = std::stoi(item.substr(colon + 1));
      if (inst < 1 || inst > 255 || cls < 0) throw std::out_of_range(item);
      labels[inst] = cls;
    } catch (const std::logic_error&) {
      throw std::runtime_error("bad label pair '" + item + "'");
    }
  }
  return labels;
}

DatasetManifest write_dataset(const std::vector<SceneSample>& samples,
                              const fs::path& dir) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  DatasetManifest manifest;
  std::ofstream tsv(dir / "manifest.tsv", std::ios::trunc);
  if (!tsv) throw std::runtime_error("cannot write manifest in " + dir.string());
  tsv << "id\timage_path\tmask_path\tlabels\n";
  for (const SceneSample& s : samples) {
    s.validate();
    ManifestEntry e{s.id, "images/" + s.id + ".ppm", "masks/" + s.id + ".pgm",
                    s.labels};
    write_ppm(dir / e.image_path, s.image);
    write_pgm(dir / e.mask_path, s.side(), s.side(), s.instance_map);
    tsv << e.id << '\t' << e.image_path << '\t' << e.mask_path << '\t'
        << format_labels(e.labels) << '\n';
    manifest.entries.push_back(std::move(e));
  }
  return manifest;
}

DatasetManifest read_manifest(const fs::path& dir) {
  std::ifstream in(dir / "manifest.tsv");
  if (!in) throw std::runtime_error("no manifest.tsv in " + dir.string());
  std::string line;
  if (!std::getline(in, line) || line != "id\timage_path\tmask_path\tlabels") {
    throw std::runtime_error((dir / "manifest.tsv").string() + ": bad header");
  }
  DatasetManifest manifest;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> cols;
    std::stringstream ss(line);
    std::string col;
    while (std::getline(ss, col, '\t')) cols.push_back(col);
    if (cols.size() == 3) cols.emplace_back();
    if (cols.size() != 4) {
      throw std::runtime_error((dir / "manifest.tsv").string() + ": line " +
                               std::to_string(lineno) + " needs 4 columns");
    }
    manifest.entries.push_back({cols[0], cols[1], cols[2], parse_labels(cols[3])});
  }
  return manifest;
}

std::vector<SceneSample> read_dataset(const fs::path& dir, std::size_t num_classes) {
  const DatasetManifest manifest = read_manifest(dir);
  std::vector<SceneSample> out;
  out.reserve(manifest.entries.size());
  for (const ManifestEntry& e : manifest.entries) {
    SceneSample s;
    s.id = e.id;
    s.image = read_ppm(dir / e.image_path);
    std::size_t w = 0, h = 0;
    s.instance_map = read_pgm(dir / e.mask_path, w, h);
    if (w != s.image.dim(2) || h != s.image.dim(1)) {
      throw std::runtime_error((dir / e.mask_path).string() +
                               ": mask size differs from image");
    }
    s.labels = e.labels;
    for (const auto& [inst, cls] : s.labels) {
      if (num_classes > 0 && static_cast<std::size_t>(cls) >= num_classes) {
        throw std::runtime_error("sample " + e.id + ": class " + std::to_string(cls) +
                                 " outside declared class count");
      }
    }
    s.validate();
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace odis
