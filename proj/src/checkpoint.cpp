#include "p3d/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include "p3d/errors.hpp"

namespace p3d {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'P', '3', 'D', 'C', 'K', 'P', 'T', '\n'};
}

json config_to_json(const UNetConfig& cfg) {
    return json{{"mode", mode_name(cfg.mode)},
                {"in_channels", cfg.in_channels},
                {"out_channels", cfg.out_channels},
                {"base_channels", cfg.base_channels},
                {"channel_mult", cfg.channel_mult},
                {"attn_levels", cfg.attn_levels},
                {"heads", cfg.heads},
                {"cond_input_dim", cfg.cond_input_dim},
                {"cond_dim", cfg.cond_dim},
                {"cond_tokens", cfg.cond_tokens},
                {"emb_dim", cfg.emb_dim},
                {"max_frames", cfg.max_frames},
                {"temporal_kernel", cfg.temporal_kernel}};
}

UNetConfig config_from_json(const json& j) {
    if (!j.is_object()) throw ConfigError("model config must be a JSON object");
    UNetConfig cfg;
    for (const auto& [key, value] : j.items()) {
        try {
            if (key == "mode")
                cfg.mode = mode_from_name(value.get<std::string>());
            else if (key == "in_channels")
                cfg.in_channels = value.get<int>();
            else if (key == "out_channels")
                cfg.out_channels = value.get<int>();
            else if (key == "base_channels")
                cfg.base_channels = value.get<int>();
            else if (key == "channel_mult")
                cfg.channel_mult = value.get<std::vector<int>>();
            else if (key == "attn_levels")
                cfg.attn_levels = value.get<std::vector<int>>();
            else if (key == "heads")
                cfg.heads = value.get<int>();
            else if (key == "cond_input_dim")
                cfg.cond_input_dim = value.get<int>();
            else if (key == "cond_dim")
                cfg.cond_dim = value.get<int>();
            else if (key == "cond_tokens")
                cfg.cond_tokens = value.get<int>();
            else if (key == "emb_dim")
                cfg.emb_dim = value.get<int>();
            else if (key == "max_frames")
                cfg.max_frames = value.get<int>();
            else if (key == "temporal_kernel")
                cfg.temporal_kernel = value.get<int>();
            else
                throw ConfigError("unknown model config key '" + key + "'");
        } catch (const json::exception& e) {
            throw ConfigError("bad value for model config key '" + key + "': " + e.what());
        }
    }
    return cfg;
}

namespace {

void write_container(const std::string& path, const std::string& kind, const json& config,
                     const json& extra, const ParamMap& pm) {
    json tensors = json::array();
    int64_t offset = 0;
    for (const auto& [name, var] : pm.items) {
        tensors.push_back(json{{"name", name}, {"shape", var->value.shape}, {"offset", offset}});
        offset += var->value.numel();
    }
    json header{{"format_version", 1},
                {"kind", kind},
                {"config", config},
                {"extra", extra},
                {"tensors", tensors}};
    const std::string head = header.dump();

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path);
    out.write(kMagic, sizeof(kMagic));
    const uint64_t hlen = head.size();
    out.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    out.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& [name, var] : pm.items)
        out.write(reinterpret_cast<const char*>(var->value.data.data()),
                  static_cast<std::streamsize>(var->value.numel() * sizeof(double)));
    out.flush();
    if (!out) throw std::runtime_error("short write on checkpoint " + path);
}

}  // namespace

void save_checkpoint(const UNetModel& model, const std::string& path, const json& extra) {
    write_container(path, "unet", config_to_json(model.cfg), extra, model.params());
}

void save_param_bundle(const ParamMap& params, const std::string& kind, const json& config,
                       const std::string& path, const json& extra) {
    write_container(path, kind, config, extra, params);
}

namespace {

json read_header_impl(std::ifstream& in, const std::string& path) {
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw ConfigError(path + " is not a model checkpoint");
    uint64_t hlen = 0;
    in.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!in || hlen == 0 || hlen > (64u << 20)) throw ConfigError(path + ": bad header length");
    std::string head(hlen, '\0');
    in.read(head.data(), static_cast<std::streamsize>(hlen));
    if (!in) throw ConfigError(path + ": truncated header");
    try {
        return json::parse(head);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": corrupt header: " + e.what());
    }
}

}  // namespace

json read_checkpoint_header(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    return read_header_impl(in, path);
}

namespace {

void check_kind(const json& header, const std::string& path, const std::string& want) {
    if (header.value("format_version", 0) != 1)
        throw ConfigError(path + ": unsupported checkpoint version");
    const std::string got = header.value("kind", "unet");
    if (got != want)
        throw ConfigError(path + ": holds a '" + got + "' checkpoint, expected '" + want + "'");
}

void read_payload_into(std::ifstream& in, const json& header, const std::string& path,
                       ParamMap& pm) {
    size_t seen = 0;
    const std::streampos payload = in.tellg();
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name").get<std::string>();
        const Shape shape = entry.at("shape").get<Shape>();
        const int64_t offset = entry.at("offset").get<int64_t>();
        ad::Var var = pm.find(name);
        if (!var) throw ConfigError(path + ": checkpoint tensor " + name + " has no home");
        if (shape != var->value.shape)
            throw ConfigError(path + ": shape mismatch for " + name + " (file " +
                              shape_str(shape) + ", model " + shape_str(var->value.shape) + ")");
        in.seekg(payload + std::streampos(offset * static_cast<int64_t>(sizeof(double))));
        in.read(reinterpret_cast<char*>(var->value.data.data()),
                static_cast<std::streamsize>(var->value.numel() * sizeof(double)));
        if (!in) throw ConfigError(path + ": truncated payload at " + name);
        ++seen;
    }
    if (seen != pm.items.size())
        throw ConfigError(path + ": checkpoint covers " + std::to_string(seen) + " of " +
                          std::to_string(pm.items.size()) + " model tensors");
}

}  // namespace

UNetModel load_checkpoint(const std::string& path, json* extra_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    json header = read_header_impl(in, path);
    check_kind(header, path, "unet");

    Rng scratch(0);  // every value below is overwritten from the file
    UNetModel model(config_from_json(header.at("config")), scratch);
    ParamMap pm = model.params();
    read_payload_into(in, header, path, pm);
    if (extra_out) *extra_out = header.value("extra", json::object());
    return model;
}

json load_param_bundle(const std::string& path, const std::string& kind, ParamMap& params,
                       json* extra_out) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    json header = read_header_impl(in, path);
    check_kind(header, path, kind);
    read_payload_into(in, header, path, params);
    if (extra_out) *extra_out = header.value("extra", json::object());
    return header.value("config", json::object());
}

}  // namespace p3d
