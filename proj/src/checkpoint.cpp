#include "pmae/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <set>
#include <sstream>

#include <zlib.h>

#include "pmae/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace pmae {

static_assert(std::endian::native == std::endian::little, "checkpoint blobs are little-endian");

namespace {

constexpr const char* kFormat = "pmae-arrays";
constexpr int kVersion = 1;

std::string dtype_name(torch::ScalarType t) {
    switch (t) {
        case torch::kFloat32: return "float32";
        case torch::kFloat64: return "float64";
        case torch::kInt64: return "int64";
        case torch::kUInt8: return "uint8";
        default: throw ConfigError(std::string("unsupported checkpoint dtype ") + c10::toString(t));
    }
}

torch::ScalarType dtype_from_name(const std::string& name) {
    if (name == "float32") return torch::kFloat32;
    if (name == "float64") return torch::kFloat64;
    if (name == "int64") return torch::kInt64;
    if (name == "uint8") return torch::kUInt8;
    throw IoError("manifest declares unknown dtype '" + name + "'");
}

std::string shape_string(at::IntArrayRef shape) {
    std::ostringstream s;
    s << shape;
    return s.str();
}

} // namespace

const torch::Tensor* ArrayBundle::find(const std::string& name) const {
    for (const auto& a : arrays) {
        if (a.name == name) return &a.value;
    }
    return nullptr;
}

const torch::Tensor& ArrayBundle::at(const std::string& name) const {
    if (const auto* t = find(name)) return *t;
    throw IoError("checkpoint has no array named '" + name + "'");
}

void save_bundle(const fs::path& dir, const ArrayBundle& bundle) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());

    json manifest;
    manifest["format"] = kFormat;
    manifest["version"] = kVersion;
    manifest["byte_order"] = "little";
    manifest["blob"] = "arrays.bin";
    manifest["metadata"] = bundle.metadata;
    manifest["arrays"] = json::array();

    std::ofstream blob(dir / "arrays.bin", std::ios::binary | std::ios::trunc);
    if (!blob) throw IoError("cannot write " + (dir / "arrays.bin").string());
    std::set<std::string> seen;
    uint64_t offset = 0;
    for (const auto& a : bundle.arrays) {
        if (!seen.insert(a.name).second) throw IoError("duplicate array name in checkpoint: " + a.name);
        auto t = a.value.detach().cpu().contiguous();
        const auto nbytes = static_cast<uint64_t>(t.numel()) * t.element_size();
        const auto* data = static_cast<const char*>(t.data_ptr());
        blob.write(data, static_cast<std::streamsize>(nbytes));
        const auto crc = crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(nbytes));
        manifest["arrays"].push_back({{"name", a.name},
                                      {"dtype", dtype_name(t.scalar_type())},
                                      {"shape", t.sizes().vec()},
                                      {"offset", offset},
                                      {"nbytes", nbytes},
                                      {"crc32", crc}});
        offset += nbytes;
    }
    blob.close();
    if (!blob) throw IoError("failed writing " + (dir / "arrays.bin").string());
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    mf << manifest.dump(2) << "\n";
    if (!mf) throw IoError("failed writing " + (dir / "manifest.json").string());
}

ArrayBundle load_bundle(const fs::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("cannot read checkpoint manifest " + (dir / "manifest.json").string());
    json manifest;
    try {
        mf >> manifest;
    } catch (const json::exception& e) {
        throw IoError("corrupt checkpoint manifest: " + std::string(e.what()));
    }
    if (manifest.value("format", "") != kFormat || manifest.value("version", 0) != kVersion) {
        throw IoError("manifest format/version mismatch: expected " + std::string(kFormat) + " v" +
                      std::to_string(kVersion));
    }
    if (manifest.value("byte_order", "") != "little") throw IoError("manifest byte_order must be 'little'");

    const auto blob_path = dir / manifest.value("blob", "arrays.bin");
    std::ifstream blob(blob_path, std::ios::binary);
    if (!blob) throw IoError("cannot read checkpoint blob " + blob_path.string());
    blob.seekg(0, std::ios::end);
    const auto blob_size = static_cast<uint64_t>(blob.tellg());

    ArrayBundle out;
    out.metadata = manifest.value("metadata", json::object());
    uint64_t declared_end = 0;
    for (const auto& rec : manifest.at("arrays")) {
        const auto name = rec.at("name").get<std::string>();
        const auto dtype = dtype_from_name(rec.at("dtype").get<std::string>());
        const auto shape = rec.at("shape").get<std::vector<int64_t>>();
        const auto offset = rec.at("offset").get<uint64_t>();
        const auto nbytes = rec.at("nbytes").get<uint64_t>();
        auto t = torch::empty(shape, torch::TensorOptions().dtype(dtype));
        const auto expect = static_cast<uint64_t>(t.numel()) * t.element_size();
        if (expect != nbytes) {
            throw IoError("manifest entry '" + name + "': shape " + shape_string(shape) + " needs " +
                          std::to_string(expect) + " bytes but nbytes=" + std::to_string(nbytes));
        }
        if (offset + nbytes > blob_size) {
            throw IoError("manifest entry '" + name + "' spans bytes [" + std::to_string(offset) + ", " +
                          std::to_string(offset + nbytes) + ") but blob has " + std::to_string(blob_size) + " bytes");
        }
        blob.seekg(static_cast<std::streamoff>(offset));
        blob.read(static_cast<char*>(t.data_ptr()), static_cast<std::streamsize>(nbytes));
        const auto crc = crc32(0L, static_cast<const Bytef*>(t.data_ptr()), static_cast<uInt>(nbytes));
        if (rec.contains("crc32") && rec.at("crc32").get<uint64_t>() != crc) {
            throw IoError("manifest entry '" + name + "': crc32 " + std::to_string(rec.at("crc32").get<uint64_t>()) +
                          " != blob crc32 " + std::to_string(crc));
        }
        declared_end = std::max(declared_end, offset + nbytes);
        out.arrays.push_back({name, t});
    }
    if (declared_end != blob_size) {
        throw IoError("blob has " + std::to_string(blob_size) + " bytes but manifest accounts for " +
                      std::to_string(declared_end));
    }
    return out;
}

void append_module(ArrayBundle& bundle, const torch::nn::Module& module, const std::string& prefix) {
    for (const auto& p : module.named_parameters()) bundle.arrays.push_back({prefix + p.key(), p.value().detach()});
    for (const auto& b : module.named_buffers()) bundle.arrays.push_back({prefix + b.key(), b.value().detach()});
}

void load_module(torch::nn::Module& module, const ArrayBundle& bundle, const std::string& prefix) {
    torch::NoGradGuard no_grad;
    auto copy = [&](const std::string& key, torch::Tensor& dst) {
        const auto name = prefix + key;
        const auto* src = bundle.find(name);
        if (src == nullptr) throw ConfigError("checkpoint mismatch at '" + name + "': array missing from checkpoint");
        if (src->scalar_type() != dst.scalar_type() || !src->sizes().equals(dst.sizes())) {
            throw ConfigError("checkpoint mismatch at '" + name + "': checkpoint " + dtype_name(src->scalar_type()) +
                              shape_string(src->sizes()) + " vs model " + dtype_name(dst.scalar_type()) +
                              shape_string(dst.sizes()));
        }
        dst.copy_(*src);
    };
    for (auto& p : module.named_parameters()) copy(p.key(), p.value());
    for (auto& b : module.named_buffers()) copy(b.key(), b.value());
    // Arrays under this prefix that the module does not have also indicate a mismatch.
    std::set<std::string> known;
    for (const auto& p : module.named_parameters()) known.insert(prefix + p.key());
    for (const auto& b : module.named_buffers()) known.insert(prefix + b.key());
    for (const auto& a : bundle.arrays) {
        if (a.name.rfind(prefix, 0) == 0 && !known.count(a.name)) {
            throw ConfigError("checkpoint mismatch at '" + a.name + "': array not present in model");
        }
    }
}

} // namespace pmae
