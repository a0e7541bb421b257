#include <algorithm>
#include <cmath>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "mifi/cli.hpp"

namespace mifi::cli {

namespace fs = std::filesystem;

namespace {

std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t x = a ^ (b + 0x9E3779B97F4A7C15ull + (a << 6) + (a >> 2));
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

fs::path params_path(const RunConfig& cfg, std::size_t fold) {
    return cfg.checkpoint_dir / fmt::format("fold{}.mifi", fold);
}
fs::path state_path(const RunConfig& cfg, std::size_t fold) {
    return cfg.checkpoint_dir / fmt::format("fold{}.state", fold);
}
fs::path losses_path(const RunConfig& cfg, std::size_t fold) {
    return cfg.report_dir / fmt::format("losses_fold{}.csv", fold);
}
fs::path risks_path(const RunConfig& cfg, std::size_t fold) {
    return cfg.report_dir / fmt::format("risks_fold{}.csv", fold);
}

std::ofstream open_out(const fs::path& path) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    return os;
}

std::vector<std::string> split_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ss(line);
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    return out;
}

double to_double(const std::string& s, const fs::path& where) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::logic_error&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw std::runtime_error(where.string() + ": bad number '" + s + "'");
    return v;
}

model::ModelConfig fold_model_config(const RunConfig& cfg, std::size_t fold) {
    auto m = cfg.model;
    m.seed = mix(cfg.train.seed, fold);
    return m;
}

void write_losses(const fs::path& path, const std::vector<EpochLosses>& rows) {
    auto os = open_out(path);
    os << "epoch,L_rec,L_align,L_surv,L_final\n";
    for (const auto& r : rows) fmt::print(os, "{},{},{},{},{}\n", r.epoch, r.rec, r.align, r.surv, r.total);
}

std::vector<EpochLosses> read_losses(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("cannot open " + path.string());
    std::string line;
    std::getline(is, line);
    std::vector<EpochLosses> rows;
    while (std::getline(is, line)) {
        const auto cells = split_line(line);
        if (cells.size() != 5) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        rows.push_back({static_cast<std::size_t>(to_double(cells[0], path)), to_double(cells[1], path),
                        to_double(cells[2], path), to_double(cells[3], path), to_double(cells[4], path)});
    }
    return rows;
}

void save_state(const fs::path& path, const model::ModelParams& params, const AdamState& state, std::size_t epoch) {
    std::vector<std::pair<std::string, Tensor>> entries;
    const auto names = params.names();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const Shape& shape = params.at(names[i]).shape();
        entries.emplace_back("adam.m/" + names[i], Tensor::from(shape, state.m.at(i)));
        entries.emplace_back("adam.v/" + names[i], Tensor::from(shape, state.v.at(i)));
    }
    entries.emplace_back("meta.epoch", Tensor::scalar(static_cast<double>(epoch)));
    entries.emplace_back("meta.step", Tensor::scalar(static_cast<double>(state.step)));
    model::save_tensor_archive(path, entries);
}

std::size_t load_state(const fs::path& path, const model::ModelParams& params, AdamState& state) {
    std::map<std::string, Tensor> entries;
    for (auto& [name, t] : model::load_tensor_archive(path)) entries.emplace(name, t);
    auto get = [&](const std::string& name) {
        auto it = entries.find(name);
        if (it == entries.end()) throw std::runtime_error(path.string() + ": missing entry '" + name + "'");
        return it->second;
    };
    state = {};
    for (const auto& name : params.names()) {
        Tensor m = get("adam.m/" + name), v = get("adam.v/" + name);
        if (m.shape() != params.at(name).shape() || v.shape() != m.shape()) {
            throw std::runtime_error(path.string() + ": optimizer state for '" + name + "' has the wrong shape");
        }
        state.m.emplace_back(m.data().begin(), m.data().end());
        state.v.emplace_back(v.data().begin(), v.data().end());
    }
    state.step = static_cast<std::int64_t>(get("meta.step").item());
    return static_cast<std::size_t>(get("meta.epoch").item());
}

void write_run_marker(const RunConfig& cfg) {
    fs::create_directories(cfg.checkpoint_dir);
    auto os = open_out(cfg.checkpoint_dir / "run.txt");
    os << "ablation = " << ablation_name(cfg.ablation) << "\n" << cfg.model.to_text();
}

void check_run_marker(const RunConfig& cfg) {
    const auto path = cfg.checkpoint_dir / "run.txt";
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing checkpoint marker " + path.string() + " (run train first)");
    std::string first;
    std::getline(is, first);
    if (first != "ablation = " + ablation_name(cfg.ablation)) {
        throw std::runtime_error(path.string() + ": checkpoints were trained with '" + first +
                                 "', config asks for ablation = " + ablation_name(cfg.ablation));
    }
    std::stringstream rest;
    rest << is.rdbuf();
    if (!(model::ModelConfig::from_text(rest.str()) == cfg.model)) {
        throw std::runtime_error(path.string() + ": checkpoint model settings differ from [model]/[cohort] config");
    }
}

double mean_of(const std::vector<double>& v) {
    return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

double sample_std(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    const double m = mean_of(v);
    double ss = 0.0;
    for (double x : v) ss += (x - m) * (x - m);
    return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

struct RiskTable {
    std::vector<double> risks, times;
    std::vector<int> events;
};

RiskTable read_risks(const fs::path& path) {
    std::ifstream is(path);
    if (!is) throw std::runtime_error("missing evaluated risks " + path.string() + " (run evaluate first)");
    std::string line;
    std::getline(is, line);
    if (line != "id,risk,time,event") throw std::runtime_error(path.string() + ": unexpected header '" + line + "'");
    RiskTable t;
    while (std::getline(is, line)) {
        const auto c = split_line(line);
        if (c.size() != 4) throw std::runtime_error(path.string() + ": malformed row '" + line + "'");
        t.risks.push_back(to_double(c[1], path));
        t.times.push_back(to_double(c[2], path));
        t.events.push_back(c[3] == "1" ? 1 : 0);
    }
    return t;
}

std::string fmt_opt(const std::optional<stats::RiskStratification>& s, double stats::RiskStratification::*field) {
    return s ? fmt::format("{}", (*s).*field) : std::string();
}

}  // namespace

TabularScaler TabularScaler::fit(const data::Cohort& cohort, const std::vector<std::size_t>& train) {
    if (train.empty()) throw std::invalid_argument("TabularScaler: empty training set");
    const std::size_t k = cohort.patients.front().tabular.size();
    TabularScaler s;
    s.mean.assign(k, 0.0);
    s.scale.assign(k, 0.0);
    for (auto i : train)
        for (std::size_t j = 0; j < k; ++j) s.mean[j] += cohort.patients[i].tabular[j];
    for (auto& m : s.mean) m /= static_cast<double>(train.size());
    for (auto i : train)
        for (std::size_t j = 0; j < k; ++j) {
            const double d = cohort.patients[i].tabular[j] - s.mean[j];
            s.scale[j] += d * d;
        }
    for (auto& v : s.scale) {
        v = std::sqrt(v / static_cast<double>(train.size()));
        if (!(v > 1e-12)) v = 1.0;
    }
    return s;
}

Tensor TabularScaler::apply(const std::vector<double>& x) const {
    std::vector<double> out(x.size());
    for (std::size_t j = 0; j < x.size(); ++j) out[j] = (x[j] - mean[j]) / scale[j];
    return Tensor::vector(out);
}

data::Cohort load_checked_cohort(const RunConfig& cfg) {
    auto cohort = data::load_cohort(cfg.cohort_dir);
    if (cohort.size() < cfg.train.folds) {
        throw std::runtime_error(cfg.cohort_dir.string() + ": " + std::to_string(cohort.size()) +
                                 " patients cannot fill [train] folds = " + std::to_string(cfg.train.folds));
    }
    const auto& first = cohort.patients.front();
    const auto [h, w, d] = cfg.model.input_shape;
    if (first.ct.shape() != Shape{1, h, w, d}) {
        throw std::runtime_error("config/cohort mismatch: [cohort] volume_shape is " + fmt::format("{} {} {}", h, w, d) +
                                 " but " + cfg.cohort_dir.string() + " holds volumes " + shape_str(first.ct.shape()));
    }
    if (first.tabular.size() != cfg.model.tabular_dim) {
        throw std::runtime_error("config/cohort mismatch: [cohort] tabular_dim is " +
                                 std::to_string(cfg.model.tabular_dim) + " but " + cfg.cohort_dir.string() +
                                 " has " + std::to_string(first.tabular.size()) + " features");
    }
    return cohort;
}

std::vector<double> predict_risks(const model::ModelParams& params, const RunConfig& cfg, const data::Cohort& cohort,
                                  const TabularScaler& scaler, const std::vector<std::size_t>& idx) {
    NoGradGuard guard;
    const auto variant = variant_for(cfg.ablation);
    std::vector<double> out;
    out.reserve(idx.size());
    for (auto i : idx) {
        const auto& p = cohort.patients[i];
        out.push_back(model::forward(p.ct, p.mask, scaler.apply(p.tabular), params, cfg.model, variant).risk.item());
    }
    return out;
}

std::vector<EpochLosses> train_fold(const RunConfig& cfg, const data::Cohort& cohort, const data::Fold& fold,
                                    std::size_t fold_index, std::ostream& log, bool resume) {
    fs::create_directories(cfg.checkpoint_dir);
    const auto mcfg = fold_model_config(cfg, fold_index);
    auto params = model::init_params(mcfg);
    const auto scaler = TabularScaler::fit(cohort, fold.train);
    const auto variant = variant_for(cfg.ablation);
    const bool use_align = cfg.ablation != Ablation::no_align;
    AdamConfig opt;
    opt.lr = cfg.train.lr;
    AdamState state;
    std::vector<EpochLosses> history;
    std::size_t done = 0;

    if (resume && fs::exists(state_path(cfg, fold_index))) {
        params = model::ModelParams::load(params_path(cfg, fold_index));
        done = load_state(state_path(cfg, fold_index), params, state);
        history = read_losses(losses_path(cfg, fold_index));
        if (history.size() < done) throw std::runtime_error(losses_path(cfg, fold_index).string() + ": fewer rows than saved epochs");
        history.resize(done);
        fmt::print(log, "fold {}: resuming after epoch {}\n", fold_index, done);
    }
    auto tensors = params.tensors();

    for (std::size_t epoch = done + 1; epoch <= cfg.train.epochs; ++epoch) {
        std::vector<std::size_t> order = fold.train;
        Rng shuffle_rng(mix(mix(cfg.train.seed, fold_index), epoch));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        EpochLosses row;
        row.epoch = epoch;
        std::size_t batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.train.batch_size) {
            const std::size_t stop = std::min(order.size(), start + cfg.train.batch_size);
            params.zero_grad();
            std::vector<Tensor> rec_terms, align_terms, risks;
            losses::BatchSurvival batch;
            for (std::size_t b = start; b < stop; ++b) {
                const auto& p = cohort.patients[order[b]];
                auto out = model::forward(p.ct, p.mask, scaler.apply(p.tabular), params, mcfg, variant);
                rec_terms.push_back(losses::reconstruction_loss(model::apply_mask(p.ct, p.mask), out.reconstruction));
                if (use_align) align_terms.push_back(losses::alignment_loss(out.f_img, out.f_tab));
                risks.push_back(out.risk);
                batch.times.push_back(p.time);
                batch.events.push_back(p.event);
            }
            const double inv_n = 1.0 / static_cast<double>(stop - start);
            Tensor rec = scale(sum(losses::stack_risks(rec_terms)), inv_n);
            Tensor align = use_align ? scale(sum(losses::stack_risks(align_terms)), inv_n) : Tensor::scalar(0.0);
            Tensor surv = Tensor::scalar(0.0);
            if (std::find(batch.events.begin(), batch.events.end(), 1) != batch.events.end()) {
                batch.risks = losses::stack_risks(risks);
                surv = losses::cox_loss(batch);
            }
            Tensor total = losses::total_loss(rec, align, surv, cfg.train.weights);
            backward(total);
            adam_step(tensors, state, opt);

            row.rec += rec.item();
            row.align += align.item();
            row.surv += surv.item();
            row.total += total.item();
            ++batches;
        }
        const double inv_b = 1.0 / static_cast<double>(batches);
        row.rec *= inv_b;
        row.align *= inv_b;
        row.surv *= inv_b;
        row.total *= inv_b;
        history.push_back(row);

        params.save(params_path(cfg, fold_index));
        save_state(state_path(cfg, fold_index), params, state, epoch);
        write_losses(losses_path(cfg, fold_index), history);
        fmt::print(log, "fold {} epoch {}/{}: L_rec {:.5f} L_align {:.5f} L_surv {:.5f} L_final {:.5f}\n", fold_index,
                   epoch, cfg.train.epochs, row.rec, row.align, row.surv, row.total);
    }
    return history;
}

GenerateSummary cmd_generate(const RunConfig& cfg, std::ostream& log) {
    cfg.cohort.validate();
    const auto cohort = data::generate_synthetic_cohort(cfg.cohort);
    data::save_cohort(cohort, cfg.cohort_dir);
    GenerateSummary s{cohort.size(), cohort.censoring_fraction()};
    fmt::print(log, "generated {} patients in {}, censoring rate {:.4f}\n", s.n, cfg.cohort_dir.string(),
               s.censoring_rate);
    return s;
}

std::vector<std::vector<EpochLosses>> cmd_train(const RunConfig& cfg, std::ostream& log, bool resume) {
    cfg.validate();
    const auto cohort = load_checked_cohort(cfg);
    const auto folds = data::kfold_split(cohort.size(), cfg.train.folds, cfg.train.seed);
    if (resume) check_run_marker(cfg);
    else write_run_marker(cfg);
    std::vector<std::vector<EpochLosses>> all;
    for (std::size_t f = 0; f < folds.size(); ++f) all.push_back(train_fold(cfg, cohort, folds[f], f, log, resume));
    return all;
}

EvalReport cmd_evaluate(const RunConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto cohort = load_checked_cohort(cfg);
    const auto folds = data::kfold_split(cohort.size(), cfg.train.folds, cfg.train.seed);
    check_run_marker(cfg);
    EvalReport report;
    std::vector<double> cs;
    for (std::size_t f = 0; f < folds.size(); ++f) {
        const auto path = params_path(cfg, f);
        if (!fs::exists(path)) throw std::runtime_error("missing checkpoint " + path.string());
        const auto params = model::ModelParams::load(path);
        const auto scaler = TabularScaler::fit(cohort, folds[f].train);
        FoldResult r;
        r.fold = f;
        r.test = folds[f].test;
        r.risks = predict_risks(params, cfg, cohort, scaler, r.test);
        std::vector<double> times;
        std::vector<int> events;
        for (auto i : r.test) {
            times.push_back(cohort.patients[i].time);
            events.push_back(cohort.patients[i].event);
        }
        r.c_index = stats::concordance_index(r.risks, times, events);
        try {
            r.strat = stats::xtile_cutoffs(r.risks, times, events, cfg.stratify.min_group_frac);
        } catch (const std::invalid_argument&) {
            r.strat.reset();
        }
        auto os = open_out(risks_path(cfg, f));
        os << "id,risk,time,event\n";
        for (std::size_t j = 0; j < r.test.size(); ++j) {
            fmt::print(os, "{},{},{},{}\n", cohort.patients[r.test[j]].id, r.risks[j], times[j], events[j]);
        }
        fmt::print(log, "fold {}: test C-index {:.4f} (n = {})\n", f, r.c_index, r.test.size());
        cs.push_back(r.c_index);
        report.folds.push_back(std::move(r));
    }
    report.mean = mean_of(cs);
    report.std = sample_std(cs);

    auto os = open_out(cfg.report_dir / "eval_report.csv");
    os << "fold,n_test,c_index,c1,c2,n_low,n_mid,n_high,logrank_chi2,p_value\n";
    for (const auto& r : report.folds) {
        fmt::print(os, "{},{},{},{},{},", r.fold, r.test.size(), r.c_index, fmt_opt(r.strat, &stats::RiskStratification::c1),
                   fmt_opt(r.strat, &stats::RiskStratification::c2));
        if (r.strat) {
            fmt::print(os, "{},{},{},", r.strat->group_sizes[0], r.strat->group_sizes[1], r.strat->group_sizes[2]);
        } else {
            os << ",,,";
        }
        fmt::print(os, "{},{}\n", fmt_opt(r.strat, &stats::RiskStratification::logrank_chi2),
                   fmt_opt(r.strat, &stats::RiskStratification::p_value));
    }
    fmt::print(os, "mean,,{},,,,,,,\n", report.mean);
    fmt::print(os, "std,,{},,,,,,,\n", report.std);
    fmt::print(log, "C-index {:.4f} +- {:.4f} over {} folds\n", report.mean, report.std, report.folds.size());
    return report;
}

stats::RiskStratification cmd_stratify(const RunConfig& cfg, std::ostream& log) {
    cfg.validate();
    RiskTable pooled;
    const std::size_t n_folds = cfg.stratify.pooled ? cfg.train.folds : 1;
    for (std::size_t f = 0; f < n_folds; ++f) {
        auto t = read_risks(risks_path(cfg, f));
        if (cfg.stratify.pooled) {
            // Risk scales differ between fold models; compare within-fold z-scores.
            const double m = mean_of(t.risks);
            double sd = sample_std(t.risks);
            if (!(sd > 0.0)) sd = 1.0;
            for (auto& r : t.risks) r = (r - m) / sd;
        }
        pooled.risks.insert(pooled.risks.end(), t.risks.begin(), t.risks.end());
        pooled.times.insert(pooled.times.end(), t.times.begin(), t.times.end());
        pooled.events.insert(pooled.events.end(), t.events.begin(), t.events.end());
    }
    auto s = stats::xtile_cutoffs(pooled.risks, pooled.times, pooled.events, cfg.stratify.min_group_frac);

    std::array<stats::SurvivalCurve, 3> curves;
    for (std::size_t g = 0; g < 3; ++g) {
        std::vector<double> t;
        std::vector<int> e;
        for (std::size_t i = 0; i < s.labels.size(); ++i) {
            if (static_cast<std::size_t>(s.labels[i]) != g) continue;
            t.push_back(pooled.times[i]);
            e.push_back(pooled.events[i]);
        }
        curves[g] = stats::kaplan_meier(t, e);
        auto os = open_out(cfg.report_dir / fmt::format("km_group{}.csv", g));
        os << "time,survival,at_risk,events\n";
        for (std::size_t k = 0; k < curves[g].event_times.size(); ++k) {
            fmt::print(os, "{},{},{},{}\n", curves[g].event_times[k], curves[g].survival[k], curves[g].at_risk[k],
                       curves[g].n_events[k]);
        }
    }
    open_out(cfg.report_dir / "km.svg") << render_km_svg(curves, s.p_value);
    auto os = open_out(cfg.report_dir / "stratification.csv");
    os << "c1,c2,n_low,n_mid,n_high,logrank_chi2,p_value\n";
    fmt::print(os, "{},{},{},{},{},{},{}\n", s.c1, s.c2, s.group_sizes[0], s.group_sizes[1], s.group_sizes[2],
               s.logrank_chi2, s.p_value);
    fmt::print(log, "cutoffs {:.4f} / {:.4f}; groups {} / {} / {}; log-rank chi2 {:.3f}, p = {:.3g}\n", s.c1, s.c2,
               s.group_sizes[0], s.group_sizes[1], s.group_sizes[2], s.logrank_chi2, s.p_value);
    return s;
}

std::uint64_t fold_hash(const std::vector<data::Fold>& folds) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    auto feed = [&](std::uint64_t v) {
        for (int i = 0; i < 8; ++i) {
            h ^= (v >> (8 * i)) & 0xffu;
            h *= 0x100000001b3ull;
        }
    };
    for (const auto& f : folds) {
        feed(f.test.size());
        for (auto i : f.test) feed(i);
    }
    return h;
}

std::vector<AblationRow> cmd_ablate(const RunConfig& cfg, std::ostream& log) {
    cfg.validate();
    std::vector<AblationRow> rows;
    for (auto a : kAllAblations) {
        RunConfig run = cfg;
        run.ablation = a;
        run.checkpoint_dir = cfg.checkpoint_dir / ablation_name(a);
        run.report_dir = cfg.report_dir / ablation_name(a);
        fmt::print(log, "== {} ==\n", ablation_name(a));
        cmd_train(run, log);
        AblationRow row{a, cmd_evaluate(run, log), 0};
        std::vector<data::Fold> used;
        for (const auto& f : row.report.folds) used.push_back({{}, f.test});
        row.fold_hash = fold_hash(used);
        rows.push_back(std::move(row));
    }
    auto os = open_out(cfg.report_dir / "ablation_table.csv");
    os << "variant,mean_c_index,std_c_index";
    for (std::size_t f = 0; f < cfg.train.folds; ++f) os << ",c_index_fold" << f;
    os << ",fold_hash\n";
    for (const auto& r : rows) {
        fmt::print(os, "{},{},{}", ablation_name(r.variant), r.report.mean, r.report.std);
        for (const auto& f : r.report.folds) fmt::print(os, ",{}", f.c_index);
        fmt::print(os, ",{:016x}\n", r.fold_hash);
    }
    for (const auto& r : rows) {
        fmt::print(log, "{:<9} {:.4f} +- {:.4f}  folds {:016x}\n", ablation_name(r.variant), r.report.mean, r.report.std,
                   r.fold_hash);
    }
    return rows;
}

}  // namespace mifi::cli
