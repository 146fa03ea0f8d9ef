#include "recticast/tensor_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

namespace recticast {

namespace {

static_assert(std::endian::native == std::endian::little, "container I/O assumes a little-endian host");

template <typename T>
constexpr const char* dtype_tag() {
    return sizeof(T) == 4 ? "f32" : "f64";
}

struct Header {
    std::string dtype;
    Shape shape;
    std::size_t payload_offset = 0;
};

Header parse_header(const std::string& bytes, const std::filesystem::path& path) {
    const std::string where = path.string();
    if (bytes.size() < 8) {
        throw FormatError(where + ": truncated at offset " + std::to_string(bytes.size()) + " (magic needs 8 bytes)");
    }
    for (std::size_t i = 0; i < 8; ++i) {
        if (bytes[i] != kTensorMagic[i]) {
            throw FormatError(where + ": bad magic at offset " + std::to_string(i));
        }
    }
    if (bytes.size() < 12) {
        throw FormatError(where + ": truncated at offset " + std::to_string(bytes.size()) +
                          " (header length needs 4 bytes at offset 8)");
    }
    std::uint32_t len = 0;
    std::memcpy(&len, bytes.data() + 8, 4);
    if (bytes.size() < 12 + static_cast<std::size_t>(len)) {
        throw FormatError(where + ": truncated header at offset " + std::to_string(bytes.size()) + " (expected " +
                          std::to_string(len) + " header bytes from offset 12)");
    }
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(bytes.begin() + 12, bytes.begin() + 12 + len);
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + ": malformed JSON header at offset 12: " + e.what());
    }
    Header h;
    try {
        h.dtype = j.at("dtype").get<std::string>();
        h.shape = j.at("shape").get<Shape>();
        if (j.at("order").get<std::string>() != "rowmajor") {
            throw FormatError(where + ": unsupported order at offset 12");
        }
    } catch (const nlohmann::json::exception& e) {
        throw FormatError(where + ": invalid header fields at offset 12: " + e.what());
    }
    if (h.dtype != "f32" && h.dtype != "f64") {
        throw FormatError(where + ": unknown dtype '" + h.dtype + "' in header at offset 12");
    }
    h.payload_offset = 12 + len;
    return h;
}

}  // namespace

std::string read_file_bytes(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw FormatError("cannot open " + path.string());
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fnv1a_hex(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << h;
    return os.str();
}

template <typename T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& tensor) {
    nlohmann::json header;
    header["dtype"] = dtype_tag<T>();
    header["shape"] = tensor.shape();
    header["order"] = "rowmajor";
    const std::string text = header.dump();
    const auto len = static_cast<std::uint32_t>(text.size());
    if (path.has_parent_path()) {
        std::filesystem::create_directories(path.parent_path());
    }
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw FormatError("cannot write " + path.string());
    }
    out.write(kTensorMagic, 8);
    out.write(reinterpret_cast<const char*>(&len), 4);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    out.write(reinterpret_cast<const char*>(tensor.data()), static_cast<std::streamsize>(tensor.numel() * sizeof(T)));
    if (!out) {
        throw FormatError("write failed for " + path.string());
    }
}

template <typename T>
BasicTensor<T> load_tensor(const std::filesystem::path& path) {
    const std::string bytes = read_file_bytes(path);
    const Header h = parse_header(bytes, path);
    if (h.dtype != dtype_tag<T>()) {
        throw FormatError(path.string() + ": dtype " + h.dtype + " at offset 12, expected " + dtype_tag<T>());
    }
    const std::size_t count = shape_numel(h.shape);
    const std::size_t need = h.payload_offset + count * sizeof(T);
    if (bytes.size() < need) {
        throw FormatError(path.string() + ": truncated payload at offset " + std::to_string(bytes.size()) +
                          " (expected " + std::to_string(need) + " bytes)");
    }
    if (bytes.size() > need) {
        throw FormatError(path.string() + ": trailing bytes after offset " + std::to_string(need));
    }
    std::vector<T> data(count);
    std::memcpy(data.data(), bytes.data() + h.payload_offset, count * sizeof(T));
    return BasicTensor<T>(h.shape, std::move(data));
}

std::string peek_tensor_dtype(const std::filesystem::path& path) {
    return parse_header(read_file_bytes(path), path).dtype;
}

template void save_tensor(const std::filesystem::path&, const BasicTensor<float>&);
template void save_tensor(const std::filesystem::path&, const BasicTensor<double>&);
template BasicTensor<float> load_tensor(const std::filesystem::path&);
template BasicTensor<double> load_tensor(const std::filesystem::path&);

}  // namespace recticast
