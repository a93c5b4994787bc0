#include "headlens/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

namespace headlens::nn {

namespace {

constexpr char kMagic[4] = {'H', 'L', 'N', 'S'};
constexpr uint32_t kVersion = 1;

void write_u32(std::ostream &out, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff), static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char *>(b), 4);
}

uint32_t read_u32(std::istream &in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char *>(b), 4);
    if (!in) throw IoError("checkpoint: truncated file");
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) | (static_cast<uint32_t>(b[2]) << 16) |
           (static_cast<uint32_t>(b[3]) << 24);
}

void write_f32(std::ostream &out, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(out, bits);
}

float read_f32(std::istream &in) {
    const uint32_t bits = read_u32(in);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

void write_tensor(std::ostream &out, const ad::ParameterF &p) {
    write_u32(out, static_cast<uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    write_u32(out, static_cast<uint32_t>(p.value.rank()));
    for (int d : p.value.shape) write_u32(out, static_cast<uint32_t>(d));
    for (float v : p.value.data) write_f32(out, v);
}

void read_tensor_into(std::istream &in, ad::ParameterF &p) {
    const uint32_t name_len = read_u32(in);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    if (name != p.name) throw IoError("checkpoint: expected tensor " + p.name + ", found " + name);
    const uint32_t rank = read_u32(in);
    if (rank != static_cast<uint32_t>(p.value.rank())) throw IoError("checkpoint: rank mismatch for " + p.name);
    for (int d : p.value.shape) {
        if (read_u32(in) != static_cast<uint32_t>(d)) throw IoError("checkpoint: shape mismatch for " + p.name);
    }
    for (float &v : p.value.data) v = read_f32(in);
}

}  // namespace

void save_checkpoint(const ModelF &m, const std::string &path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_checkpoint: cannot open " + path);
    out.write(kMagic, 4);
    write_u32(out, kVersion);
    const ModelConfig &c = m.config;
    for (int field : {c.n_layers, c.n_heads, c.n_kv_groups, c.d_model, c.d_head, c.vocab_size, c.max_seq_len,
                      c.mlp_hidden}) {
        write_u32(out, static_cast<uint32_t>(field));
    }
    write_u32(out, c.seed);
    auto params = const_cast<ModelF &>(m).parameters();
    write_u32(out, static_cast<uint32_t>(params.size()));
    for (const auto *p : params) write_tensor(out, *p);
    if (!out) throw IoError("save_checkpoint: write failed for " + path);
}

ModelF load_checkpoint(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("load_checkpoint: cannot open " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kMagic, 4) != 0) throw IoError("load_checkpoint: bad magic in " + path);
    const uint32_t version = read_u32(in);
    if (version != kVersion) throw IoError("load_checkpoint: unsupported version " + std::to_string(version));
    ModelConfig c;
    c.n_layers = static_cast<int>(read_u32(in));
    c.n_heads = static_cast<int>(read_u32(in));
    c.n_kv_groups = static_cast<int>(read_u32(in));
    c.d_model = static_cast<int>(read_u32(in));
    c.d_head = static_cast<int>(read_u32(in));
    c.vocab_size = static_cast<int>(read_u32(in));
    c.max_seq_len = static_cast<int>(read_u32(in));
    c.mlp_hidden = static_cast<int>(read_u32(in));
    c.seed = read_u32(in);
    c.validate();

    ModelF m = init_model(c);
    auto params = m.parameters();
    const uint32_t n_tensors = read_u32(in);
    if (n_tensors != params.size()) throw IoError("load_checkpoint: tensor count mismatch");
    for (auto *p : params) read_tensor_into(in, *p);
    return m;
}

std::string file_fingerprint(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("file_fingerprint: cannot open " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return to_hex(fnv1a(ss.str()));
}

}  // namespace headlens::nn
