#include "odis/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace odis {

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint I/O assumes a little-endian host");

template <typename U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

class Reader {
 public:
  Reader(const std::filesystem::path& path) : path_(path), in_(path, std::ios::binary) {
    if (!in_) throw std::runtime_error("cannot open checkpoint " + path.string());
  }

  template <typename U>
  U get() {
    U v;
    read(&v, sizeof(U));
    return v;
  }

  void read(void* dst, std::size_t n) {
    in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) {
      fail("truncated");
    }
    offset_ += n;
  }

  [[noreturn]] void fail(const std::string& what) const {
    throw std::runtime_error("checkpoint " + path_.string() + ": " + what +
                             " at byte " + std::to_string(offset_));
  }

  bool at_end() { return in_.peek() == std::char_traits<char>::eof(); }

 private:
  std::filesystem::path path_;
  std::ifstream in_;
  std::size_t offset_ = 0;
};

}  // namespace

void write_records(const std::filesystem::path& path,
                   const std::vector<Record>& records) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
  os.write("ODIS", 4);
  put<std::uint32_t>(os, kCheckpointVersion);
  put<std::uint64_t>(os, records.size());
  for (const Record& r : records) {
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.name.size()));
    os.write(r.name.data(), static_cast<std::streamsize>(r.name.size()));
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.tensor.rank()));
    for (std::size_t e : r.tensor.shape()) put<std::uint64_t>(os, e);
    os.write(reinterpret_cast<const char*>(r.tensor.data()),
             static_cast<std::streamsize>(r.tensor.size() * sizeof(float)));
  }
  if (!os) throw std::runtime_error("write failed for checkpoint " + path.string());
}

std::vector<Record> read_records(const std::filesystem::path& path) {
  Reader in(path);
  char magic[4];
  in.read(magic, 4);
  if (std::memcmp(magic, "ODIS", 4) != 0) in.fail("bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    in.fail("unsupported version " + std::to_string(version));
  }
  const auto count = in.get<std::uint64_t>();
  std::vector<Record> out;
  for (std::uint64_t i = 0; i < count; ++i) {
    Record r;
    const auto len = in.get<std::uint32_t>();
    if (len > (1u << 16)) in.fail("implausible name length");
    r.name.resize(len);
    in.read(r.name.data(), len);
    const auto rank = in.get<std::uint32_t>();
    if (rank > 8) in.fail("implausible rank " + std::to_string(rank));
    Shape shape(rank);
    for (auto& e : shape) {
      e = static_cast<std::size_t>(in.get<std::uint64_t>());
      if (e == 0 || e > (std::size_t{1} << 32)) in.fail("bad extent");
    }
    std::vector<float> data(shape_numel(shape));
    in.read(data.data(), data.size() * sizeof(float));
    r.tensor = Tensor<float>(std::move(shape), std::move(data));
    out.push_back(std::move(r));
  }
  if (!in.at_end()) in.fail("trailing bytes");
  return out;
}

}  // namespace odis
