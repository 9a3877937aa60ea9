#include <bisync/model.hpp>
#include <bisync/tensor_file.hpp>

#include <bit>
#include <cstring>
#include <fstream>

namespace bisync {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[8] = {'B', 'I', 'S', 'Y', 'N', 'C', 'C', 'K'};

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "float32") return 4;
  if (dtype == "int8") return 1;
  throw Error("unsupported tensor dtype '" + dtype + "'");
}

}  // namespace

void write_tensor_file(const std::filesystem::path& path, nlohmann::json header,
                       const std::vector<TensorBlob>& tensors) {
  header["format_version"] = kTensorFileVersion;
  auto& table = header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& t : tensors) {
    const auto expected = static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols) * dtype_size(t.dtype);
    if (t.bytes.size() != expected) throw Error("tensor '" + t.name + "' has inconsistent byte size");
    table.push_back({{"name", t.name}, {"dtype", t.dtype}, {"shape", {t.rows, t.cols}}, {"offset", offset}});
    offset += t.bytes.size();
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  const std::uint64_t len = text.size();
  out.write(kMagic, sizeof kMagic);
  out.write(reinterpret_cast<const char*>(&len), sizeof len);
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) out.write(reinterpret_cast<const char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
  if (!out) throw Error("failed writing '" + path.string() + "'");
}

TensorFile read_tensor_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  char magic[8];
  std::uint64_t len = 0;
  in.read(magic, sizeof magic);
  in.read(reinterpret_cast<char*>(&len), sizeof len);
  if (!in || std::memcmp(magic, kMagic, sizeof magic) != 0) throw Error("'" + path.string() + "' is not a bisync tensor file");
  if (len > (1u << 26)) throw Error("tensor file header is implausibly large");
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw Error("truncated tensor file header");

  TensorFile file;
  file.header = nlohmann::json::parse(text);
  if (!file.header.contains("format_version")) throw Error("tensor file lacks a format version");
  if (file.header["format_version"].get<int>() != kTensorFileVersion)
    throw Error("unsupported tensor file version " + file.header["format_version"].dump());
  for (const auto& entry : file.header.at("tensors")) {
    TensorBlob t;
    t.name = entry.at("name");
    t.dtype = entry.at("dtype");
    t.rows = entry.at("shape")[0];
    t.cols = entry.at("shape")[1];
    if (t.rows < 0 || t.cols < 0) throw Error("negative tensor shape");
    t.bytes.resize(static_cast<std::size_t>(t.rows) * static_cast<std::size_t>(t.cols) * dtype_size(t.dtype));
    in.read(reinterpret_cast<char*>(t.bytes.data()), static_cast<std::streamsize>(t.bytes.size()));
    if (!in) throw Error("truncated tensor '" + t.name + "'");
    file.tensors.push_back(std::move(t));
  }
  return file;
}

const TensorBlob& TensorFile::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return t;
  throw Error("tensor file lacks '" + name + "'");
}

void save_checkpoint(const std::filesystem::path& path, const TransformerParams<float>& params, long step) {
  std::vector<TensorBlob> blobs;
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& m = params.tensors[i];
    TensorBlob b{params.layout.names[i], "float32", static_cast<int>(m.rows()), static_cast<int>(m.cols()), {}};
    b.bytes.resize(static_cast<std::size_t>(m.size()) * sizeof(float));
    std::memcpy(b.bytes.data(), m.data(), b.bytes.size());
    blobs.push_back(std::move(b));
  }
  write_tensor_file(path, {{"kind", "checkpoint"}, {"config", params.config.to_json()}, {"step", step}}, blobs);
}

TransformerParams<float> load_checkpoint(const std::filesystem::path& path) {
  const TensorFile file = read_tensor_file(path);
  if (file.header.value("kind", "") != "checkpoint") throw Error("'" + path.string() + "' is not a float checkpoint");
  TransformerParams<float> params(ModelConfig::from_json(file.header.at("config")));
  for (std::size_t i = 0; i < params.tensors.size(); ++i) {
    const auto& blob = file.find(params.layout.names[i]);
    auto& m = params.tensors[i];
    if (blob.dtype != "float32" || blob.rows != m.rows() || blob.cols != m.cols())
      throw Error("checkpoint tensor '" + blob.name + "' has the wrong shape or dtype");
    std::memcpy(m.data(), blob.bytes.data(), blob.bytes.size());
  }
  if (!params.all_finite()) throw Error("checkpoint contains non-finite values");
  return params;
}

}  // namespace bisync
