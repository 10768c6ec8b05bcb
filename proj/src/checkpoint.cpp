#include "tavs/model.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

namespace tavs::model {

namespace {

constexpr char kMagic[8] = {'T', 'A', 'V', 'S', 'C', 'K', 'P', 'T'};

// Fixed little-endian layout independent of host struct padding.
void put_u32(std::ostream &out, std::uint32_t v) {
    unsigned char b[4];
    for (int i = 0; i < 4; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char *>(b), 4);
}

void put_f64(std::ostream &out, double d) {
    std::uint64_t v;
    std::memcpy(&v, &d, sizeof v);
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) {
        b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
    }
    out.write(reinterpret_cast<const char *>(b), 8);
}

void put_string(std::ostream &out, const std::string &s) {
    put_u32(out, static_cast<std::uint32_t>(s.size()));
    out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

std::uint32_t get_u32(std::istream &in) {
    unsigned char b[4];
    if (!in.read(reinterpret_cast<char *>(b), 4)) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
        v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    }
    return v;
}

double get_f64(std::istream &in) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char *>(b), 8)) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
        v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    }
    double d;
    std::memcpy(&d, &v, sizeof d);
    return d;
}

std::string get_string(std::istream &in) {
    const auto n = get_u32(in);
    if (n > (1u << 24)) {
        throw std::runtime_error("checkpoint: implausible string length");
    }
    std::string s(n, '\0');
    if (!in.read(s.data(), n)) {
        throw std::runtime_error("checkpoint: truncated file");
    }
    return s;
}

} // namespace

void save_checkpoint(const std::string &path, const Checkpoint &ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot write checkpoint " + path);
    }
    out.write(kMagic, sizeof kMagic);
    put_u32(out, kCheckpointVersion);
    const auto &c = ckpt.config;
    put_u32(out, static_cast<std::uint32_t>(c.vocab));
    put_u32(out, static_cast<std::uint32_t>(c.emb_dim));
    put_u32(out, static_cast<std::uint32_t>(c.hidden));
    put_u32(out, static_cast<std::uint32_t>(c.feature_dim));
    put_u32(out, c.use_prototype ? 1u : 0u);

    put_u32(out, static_cast<std::uint32_t>(ckpt.vocab.size()));
    for (const auto &t : ckpt.vocab) {
        put_string(out, t);
    }
    put_u32(out, static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto &[k, v] : ckpt.metadata) {
        put_string(out, k);
        put_string(out, v);
    }

    const auto names = ModelParams::names(c);
    const auto tensors = ckpt.params.tensors();
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        put_string(out, names[i]);
        const auto &m = tensors[i].value();
        put_u32(out, static_cast<std::uint32_t>(m.rows()));
        put_u32(out, static_cast<std::uint32_t>(m.cols()));
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            put_f64(out, m.data()[k]);
        }
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint " + path);
    }
}

Checkpoint load_checkpoint(const std::string &path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint " + path);
    }
    char magic[8];
    if (!in.read(magic, sizeof magic) || std::memcmp(magic, kMagic, sizeof magic) != 0) {
        throw std::runtime_error(path + ": not a checkpoint file");
    }
    const auto version = get_u32(in);
    if (version != kCheckpointVersion) {
        throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    Checkpoint ckpt;
    auto &c = ckpt.config;
    c.vocab = static_cast<int>(get_u32(in));
    c.emb_dim = static_cast<int>(get_u32(in));
    c.hidden = static_cast<int>(get_u32(in));
    c.feature_dim = static_cast<int>(get_u32(in));
    c.use_prototype = get_u32(in) != 0;
    c.validate();

    const auto n_vocab = get_u32(in);
    for (std::uint32_t i = 0; i < n_vocab; ++i) {
        ckpt.vocab.push_back(get_string(in));
    }
    const auto n_meta = get_u32(in);
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        auto k = get_string(in);
        ckpt.metadata[k] = get_string(in);
    }

    const auto names = ModelParams::names(c);
    const auto n_tensors = get_u32(in);
    if (n_tensors != names.size()) {
        throw std::runtime_error(path + ": tensor count does not match the model layout");
    }
    std::vector<Var> tensors;
    for (std::uint32_t i = 0; i < n_tensors; ++i) {
        const auto name = get_string(in);
        if (name != names[i]) {
            throw std::runtime_error(path + ": expected tensor '" + names[i] + "', found '" + name + "'");
        }
        const auto rows = get_u32(in);
        const auto cols = get_u32(in);
        Matrix m(rows, cols);
        for (Eigen::Index k = 0; k < m.size(); ++k) {
            m.data()[k] = get_f64(in);
        }
        tensors.emplace_back(std::move(m), true);
    }
    ckpt.params = ModelParams::from_tensors(c, std::move(tensors));
    return ckpt;
}

} // namespace tavs::model
