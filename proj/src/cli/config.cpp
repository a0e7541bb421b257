#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "mifi/cli.hpp"

namespace mifi::cli {

namespace pt = boost::property_tree;

std::string ablation_name(Ablation a) {
    switch (a) {
        case Ablation::full: return "full";
        case Ablation::no_cmifm: return "no_cmifm";
        case Ablation::no_mffsm: return "no_mffsm";
        case Ablation::no_both: return "no_both";
        case Ablation::no_align: return "no_align";
    }
    return "?";
}

Ablation parse_ablation(const std::string& name) {
    for (auto a : kAllAblations)
        if (ablation_name(a) == name) return a;
    throw std::invalid_argument("unknown ablation '" + name + "' (expected full, no_cmifm, no_mffsm, no_both, no_align)");
}

model::ModelVariant variant_for(Ablation a) {
    model::ModelVariant v;
    v.use_cmifm = a != Ablation::no_cmifm && a != Ablation::no_both;
    v.use_mffsm = a != Ablation::no_mffsm && a != Ablation::no_both;
    return v;
}

void RunConfig::validate() const {
    cohort.validate();
    model.validate();
    if (model.input_shape != cohort.volume_shape) {
        throw std::invalid_argument("config: model input shape must equal [cohort] volume_shape");
    }
    if (model.tabular_dim != cohort.tabular_dim) {
        throw std::invalid_argument("config: model tabular_dim must equal [cohort] tabular_dim");
    }
    if (train.epochs < 1) throw std::invalid_argument("config: [train] epochs must be >= 1");
    if (train.batch_size < 1) throw std::invalid_argument("config: [train] batch_size must be >= 1");
    if (!(train.lr > 0.0)) throw std::invalid_argument("config: [train] lr must be positive");
    if (train.folds < 2) throw std::invalid_argument("config: [train] folds must be >= 2");
    if (train.folds > cohort.n_patients) throw std::invalid_argument("config: [train] folds exceeds [cohort] n_patients");
    for (double w : {train.weights.rec, train.weights.align, train.weights.surv}) {
        if (!(w >= 0.0)) throw std::invalid_argument("config: [train] loss weights must be non-negative");
    }
    if (!(stratify.min_group_frac > 0.0 && stratify.min_group_frac < 1.0 / 3.0)) {
        throw std::invalid_argument("config: [stratify] min_group_frac must lie in (0, 1/3)");
    }
}

namespace {

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
    T v{};
    const char* end = raw.data() + raw.size();
    auto [ptr, ec] = std::from_chars(raw.data(), end, v);
    if (ec != std::errc() || ptr != end) throw std::invalid_argument("config: bad value for " + key + ": '" + raw + "'");
    return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
    if (raw == "true" || raw == "1" || raw == "yes") return true;
    if (raw == "false" || raw == "0" || raw == "no") return false;
    throw std::invalid_argument("config: bad value for " + key + ": '" + raw + "'");
}

std::array<std::size_t, 3> parse_shape(const std::string& key, const std::string& raw) {
    std::string s = raw;
    for (char& c : s)
        if (c == 'x' || c == ',') c = ' ';
    std::istringstream is(s);
    std::array<std::size_t, 3> out{};
    std::string tok;
    std::size_t i = 0;
    while (is >> tok) {
        if (i == 3) throw std::invalid_argument("config: " + key + " needs three extents: '" + raw + "'");
        out[i++] = parse_number<std::size_t>(key, tok);
    }
    if (i != 3) throw std::invalid_argument("config: " + key + " needs three extents: '" + raw + "'");
    return out;
}

}  // namespace

RunConfig RunConfig::parse(const std::string& text, const std::string& origin) {
    pt::ptree tree;
    std::istringstream is(text);
    try {
        pt::ini_parser::read_ini(is, tree);
    } catch (const pt::ini_parser_error& e) {
        throw std::invalid_argument(origin + ": " + e.message() + " (line " + std::to_string(e.line()) + ")");
    }

    RunConfig cfg;
    using Setter = std::function<void(const std::string&, const std::string&)>;
    const std::map<std::string, Setter> setters{
        {"paths.cohort", [&](auto&, auto& v) { cfg.cohort_dir = v; }},
        {"paths.checkpoints", [&](auto&, auto& v) { cfg.checkpoint_dir = v; }},
        {"paths.reports", [&](auto&, auto& v) { cfg.report_dir = v; }},
        {"cohort.n_patients", [&](auto& k, auto& v) { cfg.cohort.n_patients = parse_number<std::size_t>(k, v); }},
        {"cohort.volume_shape", [&](auto& k, auto& v) { cfg.cohort.volume_shape = parse_shape(k, v); }},
        {"cohort.tabular_dim", [&](auto& k, auto& v) { cfg.cohort.tabular_dim = parse_number<std::size_t>(k, v); }},
        {"cohort.censoring_rate", [&](auto& k, auto& v) { cfg.cohort.censoring_rate = parse_number<double>(k, v); }},
        {"cohort.w_img", [&](auto& k, auto& v) { cfg.cohort.w_img = parse_number<double>(k, v); }},
        {"cohort.w_tab", [&](auto& k, auto& v) { cfg.cohort.w_tab = parse_number<double>(k, v); }},
        {"cohort.baseline_hazard", [&](auto& k, auto& v) { cfg.cohort.baseline_hazard = parse_number<double>(k, v); }},
        {"cohort.seed", [&](auto& k, auto& v) { cfg.cohort.seed = parse_number<std::uint64_t>(k, v); }},
        {"model.base_channels", [&](auto& k, auto& v) { cfg.model.base_channels = parse_number<std::size_t>(k, v); }},
        {"model.embed_dim", [&](auto& k, auto& v) { cfg.model.embed_dim = parse_number<std::size_t>(k, v); }},
        {"model.heads", [&](auto& k, auto& v) { cfg.model.heads = parse_number<std::size_t>(k, v); }},
        {"model.window", [&](auto& k, auto& v) { cfg.model.window = parse_number<std::size_t>(k, v); }},
        {"model.linformer_k", [&](auto& k, auto& v) { cfg.model.linformer_k = parse_number<std::size_t>(k, v); }},
        {"train.epochs", [&](auto& k, auto& v) { cfg.train.epochs = parse_number<std::size_t>(k, v); }},
        {"train.batch_size", [&](auto& k, auto& v) { cfg.train.batch_size = parse_number<std::size_t>(k, v); }},
        {"train.lr", [&](auto& k, auto& v) { cfg.train.lr = parse_number<double>(k, v); }},
        {"train.seed", [&](auto& k, auto& v) { cfg.train.seed = parse_number<std::uint64_t>(k, v); }},
        {"train.folds", [&](auto& k, auto& v) { cfg.train.folds = parse_number<std::size_t>(k, v); }},
        {"train.ablation", [&](auto&, auto& v) { cfg.ablation = parse_ablation(v); }},
        {"train.w_rec", [&](auto& k, auto& v) { cfg.train.weights.rec = parse_number<double>(k, v); }},
        {"train.w_align", [&](auto& k, auto& v) { cfg.train.weights.align = parse_number<double>(k, v); }},
        {"train.w_surv", [&](auto& k, auto& v) { cfg.train.weights.surv = parse_number<double>(k, v); }},
        {"stratify.min_group_frac", [&](auto& k, auto& v) { cfg.stratify.min_group_frac = parse_number<double>(k, v); }},
        {"stratify.pooled", [&](auto& k, auto& v) { cfg.stratify.pooled = parse_bool(k, v); }},
    };

    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty()) {
            throw std::invalid_argument(origin + ": key '" + section + "' must live inside a section");
        }
        for (const auto& [key, node] : body) {
            const std::string full = section + "." + key;
            auto it = setters.find(full);
            if (it == setters.end()) throw std::invalid_argument(origin + ": unknown key [" + section + "] " + key);
            try {
                it->second("[" + section + "] " + key, node.data());
            } catch (const std::invalid_argument& e) {
                throw std::invalid_argument(origin + ": " + e.what());
            }
        }
    }
    cfg.model.input_shape = cfg.cohort.volume_shape;
    cfg.model.tabular_dim = cfg.cohort.tabular_dim;
    cfg.model.seed = cfg.train.seed;
    return cfg;
}

RunConfig RunConfig::load(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open config " + path.string());
    std::stringstream ss;
    ss << is.rdbuf();
    return parse(ss.str(), path.string());
}

}  // namespace mifi::cli
