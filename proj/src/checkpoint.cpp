// SPDX-License-Identifier: Apache-2.0
#include "clora/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace clora {

namespace {

constexpr char kMagic[8] = {'C', 'L', 'O', 'R', 'A', 'C', 'K', '1'};

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64(const char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(p[i])) << (8 * i);
    return v;
}

void put_f64(std::string& out, double x) { put_u64(out, std::bit_cast<std::uint64_t>(x)); }

double get_f64(const char* p) { return std::bit_cast<double>(get_u64(p)); }

const Matrix& need(const Container& c, const std::string& name) {
    auto it = c.arrays.find(name);
    if (it == c.arrays.end()) throw IoError("checkpoint: missing array '" + name + "'");
    return it->second;
}

}  // namespace

std::string encode_container(const Container& c) {
    nlohmann::json manifest;
    manifest["arrays"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& [name, m] : c.arrays) {
        manifest["arrays"].push_back({{"name", name}, {"rows", m.rows()}, {"cols", m.cols()}, {"offset", offset}});
        offset += m.size();
    }
    manifest["meta"] = c.meta;
    const std::string text = manifest.dump();
    std::string out(kMagic, sizeof kMagic);
    put_u64(out, text.size());
    out += text;
    out.reserve(out.size() + 8 * offset);
    for (const auto& [name, m] : c.arrays)
        for (double x : m.values()) put_f64(out, x);
    return out;
}

Container decode_container(const std::string& bytes) {
    if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
        throw IoError("checkpoint: bad magic");
    }
    const std::uint64_t n = get_u64(bytes.data() + 8);
    if (n > bytes.size() - 16) throw IoError("checkpoint: truncated manifest");
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.substr(16, n));
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: corrupt manifest: ") + e.what());
    }
    const std::size_t payload = 16 + n;
    const std::size_t avail = (bytes.size() - payload) / 8;
    Container c;
    try {
        c.meta = manifest.at("meta");
        for (const auto& a : manifest.at("arrays")) {
            const auto rows = a.at("rows").get<std::size_t>(), cols = a.at("cols").get<std::size_t>();
            const auto off = a.at("offset").get<std::size_t>();
            if (off > avail || rows * cols > avail - off) throw IoError("checkpoint: truncated payload");
            Matrix m(rows, cols);
            for (std::size_t i = 0; i < m.size(); ++i) m[i] = get_f64(bytes.data() + payload + 8 * (off + i));
            c.arrays.emplace(a.at("name").get<std::string>(), std::move(m));
        }
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: corrupt manifest: ") + e.what());
    }
    return c;
}

void write_file_atomic(const std::filesystem::path& path, const std::string& bytes) {
    std::error_code ec;
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path(), ec);
    const std::filesystem::path tmp = path.string() + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw IoError("cannot write " + tmp.string());
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        if (!f) throw IoError("cannot write " + tmp.string());
    }
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

std::string read_file(const std::filesystem::path& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot read " + path.string());
    std::ostringstream os;
    os << f.rdbuf();
    return os.str();
}

void write_container(const std::filesystem::path& path, const Container& c) {
    write_file_atomic(path, encode_container(c));
}

Container read_container(const std::filesystem::path& path) {
    try {
        return decode_container(read_file(path));
    } catch (const IoError& e) {
        throw IoError(path.string() + ": " + e.what());
    }
}

Container backbone_container(const Backbone& backbone) {
    Container c;
    c.arrays["embed.W"] = backbone.embed_w;
    c.arrays["embed.b"] = backbone.embed_b;
    for (std::size_t l = 0; l < backbone.depth(); ++l) c.arrays["layer" + std::to_string(l) + ".W0"] = backbone.layers[l];
    c.meta["depth"] = backbone.depth();
    c.meta["frozen"] = backbone.frozen;
    return c;
}

Backbone backbone_from_container(const Container& c) {
    Backbone bb;
    std::size_t depth = 0;
    try {
        depth = c.meta.at("depth").get<std::size_t>();
        bb.frozen = c.meta.at("frozen").get<bool>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: backbone meta: ") + e.what());
    }
    bb.embed_w = need(c, "embed.W");
    bb.embed_b = need(c, "embed.b");
    for (std::size_t l = 0; l < depth; ++l) bb.layers.push_back(need(c, "layer" + std::to_string(l) + ".W0"));
    return bb;
}

nlohmann::json adapter_config_json(const AdapterConfig& c) {
    return {{"d", c.d},
            {"r", c.r},
            {"alpha", c.alpha},
            {"hidden_c", c.hidden_c},
            {"variant", std::string(to_string(c.variant))},
            {"omega_init", c.omega_init},
            {"blob_omega_init", c.blob_omega_init},
            {"dropout", c.dropout}};
}

AdapterConfig adapter_config_from_json(const nlohmann::json& j) {
    AdapterConfig c;
    c.d = j.value("d", c.d);
    c.r = j.value("r", c.r);
    c.alpha = j.value("alpha", c.alpha);
    c.hidden_c = j.value("hidden_c", c.hidden_c);
    if (j.contains("variant")) c.variant = variant_from_string(j.at("variant").get<std::string>());
    c.omega_init = j.value("omega_init", c.omega_init);
    c.blob_omega_init = j.value("blob_omega_init", c.blob_omega_init);
    c.dropout = j.value("dropout", c.dropout);
    return c;
}

Container model_container(const AdaptedModel& model, std::uint64_t seed) {
    Container c = backbone_container(model.backbone);
    model.params.visit(model.variant(), [&](const std::string& name, const Matrix& m, ParamGroup) {
        c.arrays["adapt." + name] = m;
    });
    c.meta["adapter"] = adapter_config_json(model.config);
    c.meta["num_classes"] = model.num_classes;
    c.meta["seed"] = seed;
    return c;
}

AdaptedModel model_from_container(const Container& c) {
    const Backbone bb = backbone_from_container(c);
    AdapterConfig config;
    std::size_t k = 0;
    try {
        config = adapter_config_from_json(c.meta.at("adapter"));
        k = c.meta.at("num_classes").get<std::size_t>();
    } catch (const nlohmann::json::exception& e) {
        throw IoError(std::string("checkpoint: model meta: ") + e.what());
    }
    // Build the right shapes, then overwrite every array.
    SeededRng shape_rng(0);
    AdaptedModel model = make_adapted_model(bb, config, k, shape_rng);
    model.params.visit(model.variant(), [&](const std::string& name, Matrix& m, ParamGroup) {
        const Matrix& src = need(c, "adapt." + name);
        if (src.rows() != m.rows() || src.cols() != m.cols()) {
            throw IoError("checkpoint: array '" + name + "' is " + src.shape_str() + ", expected " + m.shape_str());
        }
        m = src;
    });
    return model;
}

void save_model(const std::filesystem::path& path, const AdaptedModel& model, std::uint64_t seed) {
    write_container(path, model_container(model, seed));
}

AdaptedModel load_model(const std::filesystem::path& path) { return model_from_container(read_container(path)); }

}  // namespace clora
