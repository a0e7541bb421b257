#include <bit>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "mifi/model.hpp"

namespace mifi::model {

namespace {

constexpr char kMagic[4] = {'M', 'I', 'F', 'I'};
constexpr std::uint32_t kArchiveVersion = 1;

void put_u32(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(b, 4);
}

void put_f64(std::ostream& os, double d) {
    const auto v = std::bit_cast<std::uint64_t>(d);
    char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
    os.write(b, 8);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
    return true;
}

bool get_f64(std::istream& is, double& d) {
    unsigned char b[8];
    if (!is.read(reinterpret_cast<char*>(b), 8)) return false;
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
    d = std::bit_cast<double>(v);
    return true;
}

std::array<std::size_t, 3> parse_triple(const std::string& key, const std::string& value) {
    std::array<std::size_t, 3> out{};
    std::stringstream ss(value);
    std::string part;
    std::size_t i = 0;
    while (std::getline(ss, part, ',')) {
        if (i >= 3) throw std::invalid_argument("model config: " + key + " needs three extents, got '" + value + "'");
        try {
            out[i++] = std::stoul(part);
        } catch (const std::logic_error&) {
            throw std::invalid_argument("model config: bad extent in " + key + ": '" + value + "'");
        }
    }
    if (i != 3) throw std::invalid_argument("model config: " + key + " needs three extents, got '" + value + "'");
    return out;
}

}  // namespace

void ModelConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
        throw std::invalid_argument("model config: " + key + " " + why);
    };
    if (n_stages != 3) fail("n_stages", "must be 3");
    if (cmifm_steps != 3) fail("cmifm_steps", "must be 3");
    const std::size_t div = std::size_t{1} << n_stages;
    for (std::size_t e : input_shape) {
        if (e == 0 || e % div != 0) fail("input_shape", "extents must be positive multiples of " + std::to_string(div));
    }
    if (base_channels == 0) fail("base_channels", "must be positive");
    if (tabular_dim == 0) fail("tabular_dim", "must be positive");
    if (embed_dim == 0) fail("embed_dim", "must be positive");
    if (window == 0) fail("window", "must be positive");
    if (heads == 0 || embed_dim % heads != 0) fail("heads", "must divide embed_dim");
    if (base_channels % heads != 0) fail("heads", "must divide base_channels");
    if (linformer_k == 0 || linformer_k > fused_length()) {
        fail("linformer_k", "must lie in [1, " + std::to_string(fused_length()) + "]");
    }
}

std::array<std::size_t, 3> ModelConfig::scale_extent(std::size_t stage) const {
    const std::size_t f = std::size_t{1} << stage;
    return {input_shape[0] / f, input_shape[1] / f, input_shape[2] / f};
}

std::size_t ModelConfig::fused_length() const {
    std::size_t total = 0;
    for (std::size_t s = 1; s <= n_stages; ++s) {
        auto e = scale_extent(s);
        total += e[0] * e[1] * e[2];
    }
    return total;
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "input_shape = " << input_shape[0] << ',' << input_shape[1] << ',' << input_shape[2] << '\n'
       << "base_channels = " << base_channels << '\n'
       << "n_stages = " << n_stages << '\n'
       << "tabular_dim = " << tabular_dim << '\n'
       << "embed_dim = " << embed_dim << '\n'
       << "heads = " << heads << '\n'
       << "window = " << window << '\n'
       << "linformer_k = " << linformer_k << '\n'
       << "cmifm_steps = " << cmifm_steps << '\n'
       << "seed = " << seed << '\n';
    return os.str();
}

ModelConfig ModelConfig::from_text(const std::string& text) {
    ModelConfig cfg;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            if (line.find_first_not_of(" \t\r") != std::string::npos) {
                throw std::invalid_argument("model config: malformed line '" + line + "'");
            }
            continue;
        }
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        auto num = [&]() -> std::uint64_t {
            std::size_t pos = 0;
            std::uint64_t v = 0;
            try {
                v = std::stoull(value, &pos);
            } catch (const std::logic_error&) {
                pos = 0;
            }
            if (pos == 0 || pos != value.size()) {
                throw std::invalid_argument("model config: bad value for " + key + ": '" + value + "'");
            }
            return v;
        };
        if (key == "input_shape") cfg.input_shape = parse_triple(key, value);
        else if (key == "base_channels") cfg.base_channels = num();
        else if (key == "n_stages") cfg.n_stages = num();
        else if (key == "tabular_dim") cfg.tabular_dim = num();
        else if (key == "embed_dim") cfg.embed_dim = num();
        else if (key == "heads") cfg.heads = num();
        else if (key == "window") cfg.window = num();
        else if (key == "linformer_k") cfg.linformer_k = num();
        else if (key == "cmifm_steps") cfg.cmifm_steps = num();
        else if (key == "seed") cfg.seed = num();
        else throw std::invalid_argument("model config: unknown key '" + key + "'");
    }
    return cfg;
}

void ModelParams::add(const std::string& name, Tensor t) {
    if (!params_.emplace(name, std::move(t)).second) {
        throw std::invalid_argument("model params: '" + name + "' registered twice");
    }
}

const Tensor& ModelParams::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("model params: no parameter '" + name + "'");
    return it->second;
}

Tensor& ModelParams::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw std::out_of_range("model params: no parameter '" + name + "'");
    return it->second;
}

std::size_t ModelParams::scalar_count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : params_) n += t.numel();
    return n;
}

std::vector<std::string> ModelParams::names() const {
    std::vector<std::string> out;
    for (const auto& [name, _] : params_) out.push_back(name);
    return out;
}

std::vector<Tensor> ModelParams::tensors() const {
    std::vector<Tensor> out;
    for (const auto& [_, t] : params_) out.push_back(t);
    return out;
}

void ModelParams::zero_grad() {
    for (auto& [_, t] : params_) t.zero_grad();
}

void ModelParams::save(const std::filesystem::path& path) const {
    std::vector<std::pair<std::string, Tensor>> entries(params_.begin(), params_.end());
    save_tensor_archive(path, entries);
}

ModelParams ModelParams::load(const std::filesystem::path& path) {
    ModelParams p;
    for (auto& [name, t] : load_tensor_archive(path)) {
        t.set_requires_grad(true);
        p.add(name, std::move(t));
    }
    return p;
}

void save_tensor_archive(const std::filesystem::path& path,
                         const std::vector<std::pair<std::string, Tensor>>& entries) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write checkpoint " + path.string());
    os.write(kMagic, 4);
    put_u32(os, kArchiveVersion);
    for (const auto& [name, t] : entries) {
        put_u32(os, static_cast<std::uint32_t>(name.size()));
        os.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(os, static_cast<std::uint32_t>(t.rank()));
        for (auto e : t.shape()) put_u32(os, static_cast<std::uint32_t>(e));
        for (double d : t.data()) put_f64(os, d);
    }
    if (!os) throw std::runtime_error("failed writing checkpoint " + path.string());
}

std::vector<std::pair<std::string, Tensor>> load_tensor_archive(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path.string());
    char magic[4];
    std::uint32_t version = 0;
    if (!is.read(magic, 4) || std::string(magic, 4) != std::string(kMagic, 4)) {
        throw std::runtime_error("checkpoint " + path.string() + ": bad magic");
    }
    if (!get_u32(is, version) || version != kArchiveVersion) {
        throw std::runtime_error("checkpoint " + path.string() + ": unsupported version");
    }
    std::vector<std::pair<std::string, Tensor>> out;
    std::uint32_t name_len = 0;
    while (get_u32(is, name_len)) {
        auto corrupt = [&](const std::string& what) {
            return std::runtime_error("checkpoint " + path.string() + ": truncated " + what);
        };
        std::string name(name_len, '\0');
        if (!is.read(name.data(), name_len)) throw corrupt("name");
        std::uint32_t rank = 0;
        if (!get_u32(is, rank) || rank > 8) throw corrupt("rank of '" + name + "'");
        Shape shape(rank);
        for (auto& e : shape) {
            std::uint32_t v = 0;
            if (!get_u32(is, v)) throw corrupt("extents of '" + name + "'");
            e = v;
        }
        std::vector<double> values(shape_numel(shape));
        for (auto& d : values) {
            if (!get_f64(is, d)) throw corrupt("payload of '" + name + "'");
        }
        out.emplace_back(name, Tensor::from(std::move(shape), std::move(values)));
    }
    if (!is.eof()) throw std::runtime_error("checkpoint " + path.string() + ": read error");
    return out;
}

}  // namespace mifi::model
