#include <algorithm>
#include <bit>
#include <cmath>
#include <fmt/format.h>
#include <fstream>
#include <nlohmann/json.hpp>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <stdexcept>

#include "mifi/data.hpp"

namespace mifi::data {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kVolMagic[4] = {'V', 'O', 'L', '0'};

std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ull;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
    return x ^ (x >> 31);
}

Rng patient_rng(std::uint64_t seed, std::size_t index) {
    return Rng(splitmix64(seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1)));
}

std::string patient_id(std::size_t index) { return fmt::format("p{:04d}", index); }

json config_to_json(const SyntheticConfig& c) {
    return json{{"n_patients", c.n_patients},
                {"volume_shape", c.volume_shape},
                {"tabular_dim", c.tabular_dim},
                {"censoring_rate", c.censoring_rate},
                {"w_img", c.w_img},
                {"w_tab", c.w_tab},
                {"baseline_hazard", c.baseline_hazard},
                {"seed", c.seed}};
}

SyntheticConfig config_from_json(const json& j) {
    SyntheticConfig c;
    c.n_patients = j.at("n_patients").get<std::size_t>();
    c.volume_shape = j.at("volume_shape").get<std::array<std::size_t, 3>>();
    c.tabular_dim = j.at("tabular_dim").get<std::size_t>();
    c.censoring_rate = j.at("censoring_rate").get<double>();
    c.w_img = j.at("w_img").get<double>();
    c.w_tab = j.at("w_tab").get<double>();
    c.baseline_hazard = j.at("baseline_hazard").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    return c;
}

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& where) {
    std::size_t pos = 0;
    double v = 0.0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::logic_error&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size()) throw std::runtime_error(where + ": bad number '" + s + "'");
    return v;
}

}  // namespace

void SyntheticConfig::validate() const {
    auto fail = [](const std::string& key, const std::string& why) {
        throw std::invalid_argument("synthetic config: " + key + " " + why);
    };
    if (n_patients == 0) fail("n_patients", "must be positive");
    for (auto e : volume_shape)
        if (e == 0) fail("volume_shape", "extents must be positive");
    if (tabular_dim == 0) fail("tabular_dim", "must be positive");
    if (!(censoring_rate > 0.0 && censoring_rate < 1.0)) fail("censoring_rate", "must lie in (0, 1)");
    if (!(w_img >= 0.0) || !(w_tab >= 0.0)) fail("w_img/w_tab", "must be non-negative");
    if (!(baseline_hazard > 0.0) || !std::isfinite(baseline_hazard)) fail("baseline_hazard", "must be positive");
}

std::vector<double> Cohort::times() const {
    std::vector<double> out;
    for (const auto& p : patients) out.push_back(p.time);
    return out;
}

std::vector<int> Cohort::events() const {
    std::vector<int> out;
    for (const auto& p : patients) out.push_back(p.event);
    return out;
}

double Cohort::censoring_fraction() const {
    if (patients.empty()) return 0.0;
    std::size_t censored = 0;
    for (const auto& p : patients) censored += p.event == 0;
    return static_cast<double>(censored) / static_cast<double>(patients.size());
}

Cohort generate_synthetic_cohort(const SyntheticConfig& cfg) {
    cfg.validate();
    const auto [H, W, D] = cfg.volume_shape;
    const std::size_t n = cfg.n_patients;
    const std::size_t n_signal = std::min<std::size_t>(3, cfg.tabular_dim);
    const double hazard_coef = (cfg.w_img + cfg.w_tab) > 0.0 ? 1.0 : 0.0;
    const double min_extent = static_cast<double>(std::min({H, W, D}));

    Cohort cohort;
    cohort.generator = cfg;
    std::vector<double> event_time(n), censor_draw(n);
    for (std::size_t p = 0; p < n; ++p) {
        Rng rng = patient_rng(cfg.seed, p);
        std::normal_distribution<double> std_normal(0.0, 1.0);
        std::uniform_real_distribution<double> unit(0.0, 1.0);
        const double z = std_normal(rng);

        // Ellipsoidal tumour: size and brightness grow with w_img * z.
        std::array<double, 3> centre{}, radius{};
        const std::array<std::size_t, 3> ext{H, W, D};
        const double size_factor = std::exp(0.25 * cfg.w_img * z);
        for (int a = 0; a < 3; ++a) {
            const double e = static_cast<double>(ext[a]);
            centre[a] = 0.5 * (e - 1.0) + (unit(rng) - 0.5) * 0.2 * e;
            radius[a] = 0.22 * min_extent * size_factor * (0.85 + 0.3 * unit(rng));
        }
        const double tumour_level = 1.0 + 0.3 * cfg.w_img * z;
        std::vector<double> ct(H * W * D), mask(H * W * D);
        for (std::size_t x = 0; x < H; ++x)
            for (std::size_t y = 0; y < W; ++y)
                for (std::size_t k = 0; k < D; ++k) {
                    const std::size_t v = (x * W + y) * D + k;
                    const double dx = (static_cast<double>(x) - centre[0]) / radius[0];
                    const double dy = (static_cast<double>(y) - centre[1]) / radius[1];
                    const double dz = (static_cast<double>(k) - centre[2]) / radius[2];
                    const bool inside = dx * dx + dy * dy + dz * dz <= 1.0;
                    mask[v] = inside ? 1.0 : 0.0;
                    ct[v] = (inside ? tumour_level : 0.2) + 0.1 * std_normal(rng);
                }
        const std::size_t cx = std::min(H - 1, static_cast<std::size_t>(std::lround(std::max(0.0, centre[0]))));
        const std::size_t cy = std::min(W - 1, static_cast<std::size_t>(std::lround(std::max(0.0, centre[1]))));
        const std::size_t cz = std::min(D - 1, static_cast<std::size_t>(std::lround(std::max(0.0, centre[2]))));
        mask[(cx * W + cy) * D + cz] = 1.0;

        std::vector<double> tab(cfg.tabular_dim);
        for (std::size_t j = 0; j < cfg.tabular_dim; ++j) {
            tab[j] = (j < n_signal ? cfg.w_tab * z : 0.0) + (j < n_signal ? 0.5 : 1.0) * std_normal(rng);
        }

        const double rate = cfg.baseline_hazard * std::exp(hazard_coef * z);
        event_time[p] = -std::log(1.0 - unit(rng)) / rate;
        censor_draw[p] = -std::log(1.0 - unit(rng));  // censoring time = draw / censoring rate

        PatientRecord rec;
        rec.id = patient_id(p);
        rec.ct = Tensor::from({1, H, W, D}, std::move(ct));
        rec.mask = Tensor::from({1, H, W, D}, std::move(mask));
        rec.tabular = std::move(tab);
        cohort.patients.push_back(std::move(rec));
        cohort.ground_truth_risk.push_back(z);
    }

    // Bisection on log(censoring rate) for the realised censored fraction.
    auto censored_fraction = [&](double log_mu) {
        const double mu = std::exp(log_mu);
        std::size_t c = 0;
        for (std::size_t p = 0; p < n; ++p) c += censor_draw[p] / mu < event_time[p];
        return static_cast<double>(c) / static_cast<double>(n);
    };
    double lo = -40.0, hi = 40.0;
    for (int it = 0; it < 200; ++it) {
        const double mid = 0.5 * (lo + hi);
        if (censored_fraction(mid) < cfg.censoring_rate) lo = mid;
        else hi = mid;
    }
    const double log_mu = std::abs(censored_fraction(lo) - cfg.censoring_rate) <=
                                  std::abs(censored_fraction(hi) - cfg.censoring_rate)
                              ? lo
                              : hi;
    const double mu = std::exp(log_mu);
    for (std::size_t p = 0; p < n; ++p) {
        const double c = censor_draw[p] / mu;
        auto& rec = cohort.patients[p];
        rec.event = event_time[p] <= c ? 1 : 0;
        rec.time = std::min(event_time[p], c);
        if (!(rec.time > 0.0)) rec.time = std::numeric_limits<double>::min();
    }
    return cohort;
}

void write_volume(const fs::path& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write volume " + path.string());
    os.write(kVolMagic, 4);
    auto put_u32 = [&](std::uint32_t v) {
        char b[4];
        for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
        os.write(b, 4);
    };
    put_u32(static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put_u32(static_cast<std::uint32_t>(e));
    for (double d : t.data()) {
        const auto v = std::bit_cast<std::uint64_t>(d);
        char b[8];
        for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
        os.write(b, 8);
    }
    if (!os) throw std::runtime_error("failed writing volume " + path.string());
}

Tensor read_volume(const fs::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open volume " + path.string());
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    std::size_t pos = 0;
    auto need = [&](std::size_t k, const char* what) {
        if (bytes.size() - pos < k) {
            throw std::runtime_error("volume " + path.string() + " is truncated (" + what + ")");
        }
    };
    auto u32 = [&](const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
        pos += 4;
        return v;
    };
    need(4, "magic");
    if (!std::equal(kVolMagic, kVolMagic + 4, bytes.begin())) throw std::runtime_error("volume " + path.string() + ": bad magic");
    pos = 4;
    const std::uint32_t rank = u32("rank");
    if (rank == 0 || rank > 8) throw std::runtime_error("volume " + path.string() + ": bad rank");
    Shape shape(rank);
    for (auto& e : shape) e = u32("extents");
    const std::size_t n = shape_numel(shape);
    need(n * 8, "payload");
    if (bytes.size() - pos != n * 8) throw std::runtime_error("volume " + path.string() + ": trailing bytes");
    std::vector<double> values(n);
    for (auto& d : values) {
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[pos + i]) << (8 * i);
        pos += 8;
        d = std::bit_cast<double>(v);
    }
    return Tensor::from(std::move(shape), std::move(values));
}

void save_cohort(const Cohort& cohort, const fs::path& dir) {
    fs::create_directories(dir / "volumes");
    fs::create_directories(dir / "masks");
    json manifest;
    manifest["format"] = "mifi-cohort";
    manifest["version"] = 1;
    manifest["n_patients"] = cohort.size();
    std::vector<std::string> ids;
    for (const auto& p : cohort.patients) ids.push_back(p.id);
    manifest["patients"] = ids;
    if (!cohort.patients.empty()) {
        const auto& s = cohort.patients.front().ct.shape();
        manifest["volume_shape"] = s;
        manifest["tabular_dim"] = cohort.patients.front().tabular.size();
    }
    manifest["generator"] = cohort.generator ? config_to_json(*cohort.generator) : json(nullptr);
    manifest["ground_truth_risk"] = cohort.ground_truth_risk;
    {
        std::ofstream os(dir / "manifest.txt", std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
        os << manifest.dump(2) << '\n';
    }

    std::ofstream csv(dir / "clinical.csv", std::ios::trunc);
    if (!csv) throw std::runtime_error("cannot write " + (dir / "clinical.csv").string());
    const std::size_t k = cohort.patients.empty() ? 0 : cohort.patients.front().tabular.size();
    csv << "id,time,event";
    for (std::size_t j = 1; j <= k; ++j) csv << ",f" << j;
    csv << '\n';
    for (const auto& p : cohort.patients) {
        csv << p.id << ',' << fmt::format("{}", p.time) << ',' << p.event;
        for (double f : p.tabular) csv << ',' << fmt::format("{}", f);
        csv << '\n';
        write_volume(dir / "volumes" / (p.id + ".vol"), p.ct);
        write_volume(dir / "masks" / (p.id + ".vol"), p.mask);
    }
}

Cohort load_cohort(const fs::path& dir) {
    const auto manifest_path = dir / "manifest.txt";
    std::ifstream ms(manifest_path);
    if (!ms) throw std::runtime_error("cannot open " + manifest_path.string());
    json manifest;
    try {
        ms >> manifest;
    } catch (const json::exception& e) {
        throw std::runtime_error(manifest_path.string() + ": malformed manifest: " + e.what());
    }
    Cohort cohort;
    std::vector<std::string> ids;
    std::size_t n = 0;
    Shape vol_shape;
    try {
        n = manifest.at("n_patients").get<std::size_t>();
        ids = manifest.at("patients").get<std::vector<std::string>>();
        if (manifest.contains("volume_shape")) vol_shape = manifest.at("volume_shape").get<Shape>();
        if (!manifest.at("generator").is_null()) cohort.generator = config_from_json(manifest.at("generator"));
        cohort.ground_truth_risk = manifest.at("ground_truth_risk").get<std::vector<double>>();
    } catch (const json::exception& e) {
        throw std::runtime_error(manifest_path.string() + ": " + e.what());
    }
    if (ids.size() != n) {
        throw std::runtime_error(manifest_path.string() + ": n_patients " + std::to_string(n) + " but " +
                                 std::to_string(ids.size()) + " ids listed");
    }
    if (std::set<std::string>(ids.begin(), ids.end()).size() != ids.size()) {
        throw std::runtime_error(manifest_path.string() + ": duplicate patient ids");
    }
    if (!cohort.ground_truth_risk.empty() && cohort.ground_truth_risk.size() != n) {
        throw std::runtime_error(manifest_path.string() + ": ground_truth_risk length mismatch");
    }
    for (const char* sub : {"volumes", "masks"}) {
        std::size_t files = 0;
        if (fs::is_directory(dir / sub)) {
            for (const auto& entry : fs::directory_iterator(dir / sub)) files += entry.path().extension() == ".vol";
        }
        if (files != n) {
            throw std::runtime_error(manifest_path.string() + " lists " + std::to_string(n) + " patients but " +
                                     (dir / sub).string() + " holds " + std::to_string(files) + " volume files");
        }
    }

    const auto csv_path = dir / "clinical.csv";
    std::ifstream csv(csv_path);
    if (!csv) throw std::runtime_error("cannot open " + csv_path.string());
    std::string line;
    if (!std::getline(csv, line)) throw std::runtime_error(csv_path.string() + ": missing header");
    const auto header = split_csv(line);
    if (header.size() < 3 || header[0] != "id" || header[1] != "time" || header[2] != "event") {
        throw std::runtime_error(csv_path.string() + ": header must start with id,time,event");
    }
    const std::size_t k = header.size() - 3;
    std::vector<std::vector<std::string>> rows;
    while (std::getline(csv, line)) {
        if (line.empty()) continue;
        rows.push_back(split_csv(line));
    }
    if (rows.size() != n) {
        throw std::runtime_error(csv_path.string() + " has " + std::to_string(rows.size()) + " rows but manifest lists " +
                                 std::to_string(n) + " patients");
    }
    for (std::size_t i = 0; i < n; ++i) {
        const auto& row = rows[i];
        const std::string where = csv_path.string() + " row " + std::to_string(i + 1);
        if (row.size() != k + 3) throw std::runtime_error(where + ": expected " + std::to_string(k + 3) + " columns");
        if (row[0] != ids[i]) throw std::runtime_error(where + ": id '" + row[0] + "' does not match manifest '" + ids[i] + "'");
        PatientRecord p;
        p.id = row[0];
        p.time = parse_double(row[1], where);
        if (!(p.time > 0.0)) throw std::runtime_error(where + ": time must be positive");
        if (row[2] != "0" && row[2] != "1") throw std::runtime_error(where + ": event must be 0 or 1");
        p.event = row[2] == "1";
        for (std::size_t j = 0; j < k; ++j) p.tabular.push_back(parse_double(row[3 + j], where));
        try {
            p.ct = read_volume(dir / "volumes" / (p.id + ".vol"));
            p.mask = read_volume(dir / "masks" / (p.id + ".vol"));
        } catch (const std::runtime_error& e) {
            throw std::runtime_error("corrupt volume file for patient " + p.id + ": " + e.what());
        }
        if (p.ct.shape() != p.mask.shape() || (!vol_shape.empty() && p.ct.shape() != vol_shape)) {
            throw std::runtime_error("patient " + p.id + ": volume shape " + shape_str(p.ct.shape()) +
                                     " inconsistent with mask " + shape_str(p.mask.shape()) + " or manifest");
        }
        for (double m : p.mask.data()) {
            if (m != 0.0 && m != 1.0) throw std::runtime_error("patient " + p.id + ": mask is not binary");
        }
        cohort.patients.push_back(std::move(p));
    }
    return cohort;
}

std::vector<Fold> kfold_split(std::size_t n, std::size_t k, std::uint64_t seed) {
    if (k == 0 || n < k) {
        throw std::invalid_argument("kfold_split: need n >= k >= 1 (n=" + std::to_string(n) + ", k=" + std::to_string(k) + ")");
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(seed);
    std::shuffle(perm.begin(), perm.end(), rng);
    std::vector<Fold> folds(k);
    std::size_t start = 0;
    for (std::size_t f = 0; f < k; ++f) {
        const std::size_t size = n / k + (f < n % k ? 1 : 0);
        std::vector<bool> in_test(n, false);
        for (std::size_t i = start; i < start + size; ++i) {
            folds[f].test.push_back(perm[i]);
            in_test[perm[i]] = true;
        }
        std::sort(folds[f].test.begin(), folds[f].test.end());
        for (std::size_t i = 0; i < n; ++i)
            if (!in_test[i]) folds[f].train.push_back(i);
        start += size;
    }
    return folds;
}

}  // namespace mifi::data
