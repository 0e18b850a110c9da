#include "projprobe/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "projprobe/errors.hpp"

namespace projprobe {

using nlohmann::json;

namespace {

constexpr char kMagic[4] = {'P', 'P', 'C', 'K'};

void write_u16(std::ostream& os, std::uint16_t v) {
    unsigned char b[2] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8)};
    os.write(reinterpret_cast<const char*>(b), 2);
}

void write_u32(std::ostream& os, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint16_t read_u16(std::istream& is) {
    unsigned char b[2];
    is.read(reinterpret_cast<char*>(b), 2);
    return static_cast<std::uint16_t>(b[0] | (b[1] << 8));
}

std::uint32_t read_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return v;
}

}  // namespace

void save_arrays(const std::string& path,
                 const std::vector<std::pair<std::string, const Mat*>>& arrays) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw ConfigError("checkpoint: cannot open for writing: " + path);
    os.write(kMagic, 4);
    write_u32(os, kCheckpointVersion);
    write_u32(os, static_cast<std::uint32_t>(arrays.size()));
    for (const auto& [name, mat] : arrays) {
        write_u16(os, static_cast<std::uint16_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        write_u32(os, static_cast<std::uint32_t>(mat->rows()));
        write_u32(os, static_cast<std::uint32_t>(mat->cols()));
        os.write(reinterpret_cast<const char*>(mat->data()),
                 static_cast<std::streamsize>(mat->size() * sizeof(double)));
    }
    if (!os) throw ConfigError("checkpoint: write failed: " + path);
}

std::map<std::string, Mat> load_arrays(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw LookupError("checkpoint: cannot open: " + path);
    char magic[4];
    is.read(magic, 4);
    if (!is || std::memcmp(magic, kMagic, 4) != 0)
        throw ConfigError("checkpoint: bad magic in " + path);
    const std::uint32_t version = read_u32(is);
    if (version != kCheckpointVersion)
        throw ConfigError("checkpoint: unsupported version in " + path);
    const std::uint32_t count = read_u32(is);
    std::map<std::string, Mat> out;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t len = read_u16(is);
        std::string name(len, '\0');
        is.read(name.data(), len);
        const int rows = static_cast<int>(read_u32(is));
        const int cols = static_cast<int>(read_u32(is));
        Mat m(rows, cols);
        is.read(reinterpret_cast<char*>(m.data()),
                static_cast<std::streamsize>(m.size() * sizeof(double)));
        if (!is) throw ConfigError("checkpoint: truncated file: " + path);
        out.emplace(std::move(name), std::move(m));
    }
    return out;
}

json projector_arch_to_json(const ProjectorParams& proj) {
    if (const auto* c = std::get_if<CompressedProjectorParams>(&proj)) {
        return json{{"kind", "compressed"},
                    {"num_queries", c->num_queries},
                    {"d_model", c->d_model},
                    {"d_out", c->d_out},
                    {"heads", c->heads},
                    {"mlp_hidden", c->mlp_hidden},
                    {"blocks", c->blocks.size()},
                    {"instr_conditioned", c->instr_conditioned}};
    }
    const auto& u = std::get<UncompressedProjectorParams>(proj);
    return json{{"kind", "uncompressed"},
                {"pool_factor", u.pool_factor},
                {"d_in", u.d_in},
                {"d_hidden", u.d_hidden},
                {"d_out", u.d_out}};
}

ProjectorParams projector_from_arch_json(const json& arch) {
    Rng rng(0);
    const std::string kind = arch.at("kind");
    if (kind == "compressed") {
        return CompressedProjectorParams::init(
            arch.at("num_queries"), arch.at("d_model"), arch.at("d_out"),
            arch.at("blocks"), arch.at("heads"), arch.at("mlp_hidden"),
            arch.at("instr_conditioned"), rng);
    }
    if (kind == "uncompressed") {
        return UncompressedProjectorParams::init(arch.at("pool_factor"), arch.at("d_in"),
                                                 arch.at("d_hidden"), arch.at("d_out"), rng);
    }
    throw ConfigError("checkpoint: unknown projector kind: " + kind);
}

json arch_to_json(const ToyLVLM& model) {
    const auto& e = model.encoder;
    return json{
        {"encoder",
         {{"image_size", e.image_size}, {"patch", e.patch}, {"d_model", e.d_model},
          {"heads", e.heads}, {"mlp_hidden", e.mlp_hidden}, {"blocks", e.blocks.size()}}},
        {"projector", projector_arch_to_json(model.projector)},
        {"instr",
         {{"vocab", model.instr.vocab}, {"t_instr", model.instr.t_instr},
          {"d_model", model.instr.d_model}}},
        {"head",
         {{"variant", model.head.variant}, {"d_model", model.head.d_model},
          {"heads", model.head.heads}, {"n_answers", model.head.n_answers}}}};
}

ToyLVLM model_from_arch_json(const json& arch) {
    Rng rng(0);
    const json& e = arch.at("encoder");
    ToyLVLM m{
        VisualEncoderParams::init(e.at("image_size"), e.at("patch"), e.at("d_model"),
                                  e.at("blocks"), e.at("heads"), e.at("mlp_hidden"), rng),
        projector_from_arch_json(arch.at("projector")),
        InstrEmbedParams::init(arch.at("instr").at("vocab"), arch.at("instr").at("t_instr"),
                               arch.at("instr").at("d_model"), rng),
        DownstreamHeadParams::init(arch.at("head").at("variant"), arch.at("head").at("d_model"),
                                   arch.at("head").at("heads"), arch.at("head").at("n_answers"),
                                   rng)};
    return m;
}

namespace {

void write_sidecar(const std::string& path, const json& arch, const json& extra) {
    json side = extra;
    side["schema_version"] = kCheckpointVersion;
    side["arch"] = arch;
    std::ofstream os(path + ".json", std::ios::trunc);
    if (!os) throw ConfigError("checkpoint: cannot write sidecar for " + path);
    os << side.dump(2) << "\n";
}

json read_sidecar(const std::string& path) {
    std::ifstream is(path + ".json");
    if (!is) throw LookupError("checkpoint: missing sidecar for " + path);
    json side;
    is >> side;
    return side;
}

template <typename Visitable>
void fill_from_arrays(Visitable& v, const std::map<std::string, Mat>& arrays,
                      const std::string& prefix) {
    v.visit(prefix, [&](const std::string& name, Mat& m) {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw ConfigError("checkpoint: missing array " + name);
        if (!m.same_shape(it->second))
            throw ConfigError("checkpoint: shape mismatch for " + name);
        m = it->second;
    });
}

}  // namespace

void save_model(ToyLVLM& model, const std::string& path, const json& extra) {
    std::vector<std::pair<std::string, const Mat*>> arrays;
    model.visit([&](const std::string& name, Mat& m) { arrays.push_back({name, &m}); });
    save_arrays(path, arrays);
    write_sidecar(path, arch_to_json(model), extra);
}

ToyLVLM load_model(const std::string& path) {
    const json side = read_sidecar(path);
    ToyLVLM model = model_from_arch_json(side.at("arch"));
    const auto arrays = load_arrays(path);
    model.visit([&](const std::string& name, Mat& m) {
        auto it = arrays.find(name);
        if (it == arrays.end()) throw ConfigError("checkpoint: missing array " + name);
        if (!m.same_shape(it->second))
            throw ConfigError("checkpoint: shape mismatch for " + name);
        m = it->second;
    });
    return model;
}

void save_projector(ProjectorParams& proj, const std::string& path, const json& extra) {
    std::vector<std::pair<std::string, const Mat*>> arrays;
    auto collect = [&](const std::string& name, Mat& m) { arrays.push_back({name, &m}); };
    if (auto* c = std::get_if<CompressedProjectorParams>(&proj))
        c->visit("proj", collect);
    else
        std::get<UncompressedProjectorParams>(proj).visit("proj", collect);
    save_arrays(path, arrays);
    write_sidecar(path, projector_arch_to_json(proj), extra);
}

ProjectorParams load_projector(const std::string& path) {
    const json side = read_sidecar(path);
    ProjectorParams proj = projector_from_arch_json(side.at("arch"));
    const auto arrays = load_arrays(path);
    if (auto* c = std::get_if<CompressedProjectorParams>(&proj))
        fill_from_arrays(*c, arrays, "proj");
    else
        fill_from_arrays(std::get<UncompressedProjectorParams>(proj), arrays, "proj");
    return proj;
}

}  // namespace projprobe
