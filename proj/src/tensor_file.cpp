#include "prunekit/tensor_file.hpp"

#include <cstring>
#include <fstream>

#include "prunekit/errors.hpp"

namespace prunekit {

static constexpr char MAGIC[4] = {'P', 'B', 'C', 'K'};
static constexpr uint32_t FORMAT_VERSION = 1;

const TensorEntry * TensorFile::find(const std::string & name) const {
    for (const auto & t : tensors) {
        if (t.name == name) {
            return &t;
        }
    }
    return nullptr;
}

static size_t dtype_size(const std::string & dtype) {
    if (dtype == "f32" || dtype == "u32") {
        return 4;
    }
    throw IoError("tensor file: unknown dtype '" + dtype + "'");
}

static uint64_t shape_elements(const std::vector<int64_t> & shape) {
    uint64_t n = 1;
    for (int64_t d : shape) {
        if (d < 0) {
            throw IoError("tensor file: negative shape dimension");
        }
        n *= static_cast<uint64_t>(d);
    }
    return n;
}

void save_tensor_file(const std::string & path, const TensorFile & file) {
    nlohmann::ordered_json header;
    header["config"] = file.config;
    auto index = nlohmann::ordered_json::array();

    uint64_t offset = 0;
    for (const auto & t : file.tensors) {
        const uint64_t expect = shape_elements(t.shape) * dtype_size(t.dtype);
        if (expect != t.bytes.size()) {
            throw IoError("tensor file: tensor '" + t.name + "' payload size does not match shape");
        }
        nlohmann::ordered_json e;
        e["name"] = t.name;
        e["dtype"] = t.dtype;
        e["shape"] = t.shape;
        e["offset"] = offset;
        e["nbytes"] = t.bytes.size();
        index.push_back(std::move(e));
        offset += t.bytes.size();
    }
    header["tensors"] = std::move(index);

    const std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw IoError("cannot open '" + path + "' for writing");
    }
    out.write(MAGIC, 4);
    const uint32_t version = FORMAT_VERSION;
    out.write(reinterpret_cast<const char *>(&version), 4);
    const uint64_t header_len = header_str.size();
    out.write(reinterpret_cast<const char *>(&header_len), 8);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto & t : file.tensors) {
        out.write(reinterpret_cast<const char *>(t.bytes.data()),
                  static_cast<std::streamsize>(t.bytes.size()));
    }
    if (!out) {
        throw IoError("write failed for '" + path + "'");
    }
}

TensorFile load_tensor_file(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open '" + path + "' for reading");
    }
    in.seekg(0, std::ios::end);
    const uint64_t file_size = static_cast<uint64_t>(in.tellg());
    in.seekg(0);

    if (file_size < 16) {
        throw IoError("tensor file '" + path + "': truncated header");
    }
    char magic[4];
    in.read(magic, 4);
    if (std::memcmp(magic, MAGIC, 4) != 0) {
        throw IoError("tensor file '" + path + "': bad magic");
    }
    uint32_t version = 0;
    in.read(reinterpret_cast<char *>(&version), 4);
    if (version != FORMAT_VERSION) {
        throw IoError("tensor file '" + path + "': unsupported version " + std::to_string(version));
    }
    uint64_t header_len = 0;
    in.read(reinterpret_cast<char *>(&header_len), 8);
    if (16 + header_len > file_size) {
        throw IoError("tensor file '" + path + "': truncated header");
    }
    std::string header_str(header_len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(header_len));

    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(header_str);
    } catch (const nlohmann::json::exception & e) {
        throw IoError("tensor file '" + path + "': malformed header JSON: " + e.what());
    }
    if (!header.contains("config") || !header.contains("tensors") || !header["tensors"].is_array()) {
        throw IoError("tensor file '" + path + "': header missing config or tensor index");
    }

    const uint64_t payload_base = 16 + header_len;
    const uint64_t payload_size = file_size - payload_base;

    TensorFile file;
    file.config = header["config"];
    for (const auto & e : header["tensors"]) {
        TensorEntry t;
        try {
            t.name = e.at("name").get<std::string>();
            t.dtype = e.at("dtype").get<std::string>();
            t.shape = e.at("shape").get<std::vector<int64_t>>();
            const uint64_t offset = e.at("offset").get<uint64_t>();
            const uint64_t nbytes = e.at("nbytes").get<uint64_t>();
            if (shape_elements(t.shape) * dtype_size(t.dtype) != nbytes) {
                throw IoError("tensor file '" + path + "': tensor '" + t.name +
                              "' shape-layout mismatch");
            }
            if (offset + nbytes > payload_size) {
                throw IoError("tensor file '" + path + "': tensor '" + t.name +
                              "' truncated payload");
            }
            t.bytes.resize(nbytes);
            in.seekg(static_cast<std::streamoff>(payload_base + offset));
            in.read(reinterpret_cast<char *>(t.bytes.data()), static_cast<std::streamsize>(nbytes));
            if (!in) {
                throw IoError("tensor file '" + path + "': read failed for tensor '" + t.name + "'");
            }
        } catch (const nlohmann::json::exception & ex) {
            throw IoError("tensor file '" + path + "': bad tensor index entry: " + ex.what());
        }
        file.tensors.push_back(std::move(t));
    }
    return file;
}

} // namespace prunekit
