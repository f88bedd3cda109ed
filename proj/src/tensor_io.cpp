#include "cesynth/tensor_io.hpp"

#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <memory>
#include <sstream>
#include <stdexcept>

#include <openssl/evp.h>
#include <png.h>

namespace cesynth {

static_assert(std::endian::native == std::endian::little,
              "file formats are written with native little-endian layout");

namespace {

constexpr char kTensorMagic[8] = {'C', 'S', 'T', 'E', 'N', 'S', 'O', 'R'};
constexpr char kContainerMagic[8] = {'C', 'S', 'C', 'K', 'P', 'T', '0', '1'};
constexpr std::uint32_t kTensorVersion = 1;

template <typename T>
void put(std::ostream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& is, const fs::path& path) {
  T v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw std::runtime_error("truncated file: " + path.string());
  }
  return v;
}

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open for writing: " + path.string());
  return os;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open for reading: " + path.string());
  return is;
}

std::string dtype_tag(const torch::Tensor& t) {
  switch (t.scalar_type()) {
    case torch::kFloat32:
    case torch::kFloat64:
      return "f32";
    case torch::kInt64:
      return "i64";
    case torch::kUInt8:
      return "u8";
    default:
      throw std::invalid_argument("container: unsupported dtype " +
                                  std::string(c10::toString(t.scalar_type())));
  }
}

torch::ScalarType scalar_type(const std::string& tag) {
  if (tag == "f32") return torch::kFloat32;
  if (tag == "i64") return torch::kInt64;
  if (tag == "u8") return torch::kUInt8;
  throw std::runtime_error("container: unknown dtype tag '" + tag + "'");
}

}  // namespace

void write_tensor_file(const fs::path& path, const torch::Tensor& tensor) {
  auto t = tensor.detach().to(torch::kFloat32).contiguous();
  auto os = open_out(path);
  os.write(kTensorMagic, 8);
  put<std::uint32_t>(os, kTensorVersion);
  put<std::uint32_t>(os, static_cast<std::uint32_t>(t.dim()));
  for (auto d : t.sizes()) put<std::uint64_t>(os, static_cast<std::uint64_t>(d));
  os.write(reinterpret_cast<const char*>(t.data_ptr<float>()),
           static_cast<std::streamsize>(t.numel() * sizeof(float)));
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

torch::Tensor read_tensor_file(const fs::path& path) {
  auto is = open_in(path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kTensorMagic, 8) != 0) {
    throw std::runtime_error("not a tensor file (bad magic): " + path.string());
  }
  const auto version = get<std::uint32_t>(is, path);
  if (version != kTensorVersion) {
    throw std::runtime_error("unsupported tensor file version " + std::to_string(version) +
                             ": " + path.string());
  }
  const auto rank = get<std::uint32_t>(is, path);
  if (rank > 8) throw std::runtime_error("implausible tensor rank in " + path.string());
  std::vector<std::int64_t> dims;
  for (std::uint32_t i = 0; i < rank; ++i) {
    dims.push_back(static_cast<std::int64_t>(get<std::uint64_t>(is, path)));
  }
  auto t = torch::empty(dims, torch::kFloat32);
  if (!is.read(reinterpret_cast<char*>(t.data_ptr<float>()),
               static_cast<std::streamsize>(t.numel() * sizeof(float)))) {
    throw std::runtime_error("truncated tensor payload: " + path.string());
  }
  return t;
}

bool Container::contains(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return true;
  }
  return false;
}

const torch::Tensor& Container::at(const std::string& name) const {
  for (const auto& nt : tensors) {
    if (nt.name == name) return nt.value;
  }
  throw std::out_of_range("container has no tensor named '" + name + "'");
}

void Container::add(std::string name, torch::Tensor value) {
  tensors.push_back({std::move(name), std::move(value)});
}

void write_container(const fs::path& path, const Container& container) {
  nlohmann::json header;
  header["format"] = "cesynth-container";
  header["version"] = 1;
  header["meta"] = container.meta;
  header["tensors"] = nlohmann::json::array();

  std::vector<torch::Tensor> payload;
  std::uint64_t offset = 0;
  for (const auto& nt : container.tensors) {
    const auto tag = dtype_tag(nt.value);
    auto t = nt.value.detach().to(scalar_type(tag)).contiguous();
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    header["tensors"].push_back(
        {{"name", nt.name}, {"dtype", tag}, {"shape", t.sizes().vec()}, {"offset", offset},
         {"nbytes", nbytes}});
    offset += nbytes;
    payload.push_back(t);
  }
  const auto text = header.dump();
  auto os = open_out(path);
  os.write(kContainerMagic, 8);
  put<std::uint64_t>(os, text.size());
  os.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : payload) {
    os.write(static_cast<const char*>(t.data_ptr()),
             static_cast<std::streamsize>(t.numel() * t.element_size()));
  }
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Container read_container(const fs::path& path) {
  auto is = open_in(path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kContainerMagic, 8) != 0) {
    throw std::runtime_error("not a checkpoint container (bad magic): " + path.string());
  }
  const auto hlen = get<std::uint64_t>(is, path);
  if (hlen > (std::uint64_t{1} << 30)) throw std::runtime_error("corrupt header length");
  std::string text(hlen, '\0');
  if (!is.read(text.data(), static_cast<std::streamsize>(hlen))) {
    throw std::runtime_error("truncated checkpoint header: " + path.string());
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const auto payload_start = is.tellg();
  Container c;
  c.meta = header.value("meta", nlohmann::json::object());
  for (const auto& entry : header.at("tensors")) {
    const auto dtype = scalar_type(entry.at("dtype").get<std::string>());
    const auto shape = entry.at("shape").get<std::vector<std::int64_t>>();
    const auto offset = entry.at("offset").get<std::uint64_t>();
    auto t = torch::empty(shape, dtype);
    const auto nbytes = static_cast<std::uint64_t>(t.numel() * t.element_size());
    if (nbytes != entry.at("nbytes").get<std::uint64_t>()) {
      throw std::runtime_error("checkpoint entry '" + entry.at("name").get<std::string>() +
                               "' has inconsistent size");
    }
    is.seekg(payload_start + static_cast<std::streamoff>(offset));
    if (!is.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes))) {
      throw std::runtime_error("truncated checkpoint payload: " + path.string());
    }
    c.add(entry.at("name").get<std::string>(), t);
  }
  return c;
}

void append_parameters(Container& container, const torch::nn::Module& module,
                       const std::string& prefix) {
  for (const auto& item : module.named_parameters(true)) {
    container.add(prefix + item.key(), item.value().detach().to(torch::kFloat32).clone());
  }
}

void load_parameters(torch::nn::Module& module, const Container& container,
                     const std::string& prefix) {
  torch::NoGradGuard no_grad;
  auto params = module.named_parameters(true);
  std::size_t matched = 0;
  for (auto& item : params) {
    const auto name = prefix + item.key();
    if (!container.contains(name)) {
      throw std::runtime_error("checkpoint is missing parameter '" + name + "'");
    }
    const auto& src = container.at(name);
    if (src.sizes() != item.value().sizes()) {
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " +
                               c10::str(src.sizes()) + ", expected " +
                               c10::str(item.value().sizes()));
    }
    item.value().copy_(src);
    ++matched;
  }
  std::size_t available = 0;
  for (const auto& nt : container.tensors) {
    if (nt.name.rfind(prefix, 0) == 0) ++available;
  }
  if (available != matched) {
    throw std::runtime_error("checkpoint carries " + std::to_string(available - matched) +
                             " unexpected parameter(s) under prefix '" + prefix + "'");
  }
}

void write_png_gray(const fs::path& path, const torch::Tensor& image, double lo, double hi) {
  auto img = image.detach().to(torch::kFloat64).squeeze();
  if (img.dim() != 2) {
    throw std::invalid_argument("write_png_gray: expected a single 2D image, got " +
                                c10::str(image.sizes()));
  }
  if (!(hi > lo)) throw std::invalid_argument("write_png_gray: need hi > lo");
  auto bytes = ((img - lo) / (hi - lo) * 255.0).round().clamp(0, 255).to(torch::kUInt8).contiguous();
  const auto h = static_cast<png_uint_32>(bytes.size(0));
  const auto w = static_cast<png_uint_32>(bytes.size(1));

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.c_str(), "wb"), &std::fclose);
  if (!fp) throw std::runtime_error("cannot open for writing: " + path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw std::runtime_error("libpng write failed: " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  auto* base = bytes.data_ptr<std::uint8_t>();
  for (png_uint_32 y = 0; y < h; ++y) png_write_row(png, base + static_cast<std::size_t>(y) * w);
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

std::string sha256_file(const fs::path& path) {
  auto is = open_in(path);
  std::unique_ptr<EVP_MD_CTX, void (*)(EVP_MD_CTX*)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr);
  std::vector<char> buf(1 << 16);
  while (is) {
    is.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (is.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(is.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  }
  return hex.str();
}

}  // namespace cesynth
