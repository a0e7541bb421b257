#include <algorithm>
#include <fmt/format.h>

#include "mifi/cli.hpp"

namespace mifi::cli {

namespace {

constexpr double kWidth = 640.0, kHeight = 420.0;
constexpr double kLeft = 60.0, kRight = 20.0, kTop = 20.0, kBottom = 50.0;
constexpr const char* kColours[3] = {"#1b9e77", "#d95f02", "#7570b3"};
constexpr const char* kLabels[3] = {"low risk", "mid risk", "high risk"};

}  // namespace

std::string render_km_svg(const std::array<stats::SurvivalCurve, 3>& curves, double p_value) {
    double t_max = 0.0;
    for (const auto& c : curves)
        if (!c.event_times.empty()) t_max = std::max(t_max, c.event_times.back());
    if (!(t_max > 0.0)) t_max = 1.0;
    const double pw = kWidth - kLeft - kRight, ph = kHeight - kTop - kBottom;
    auto sx = [&](double t) { return kLeft + pw * t / t_max; };
    auto sy = [&](double s) { return kTop + ph * (1.0 - s); };

    std::string out;
    out += fmt::format(
        "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{0}\" height=\"{1}\" viewBox=\"0 0 {0} {1}\">\n",
        kWidth, kHeight);
    out += fmt::format("  <rect x=\"0\" y=\"0\" width=\"{}\" height=\"{}\" fill=\"white\"/>\n", kWidth, kHeight);
    out += fmt::format(
        "  <g stroke=\"black\" stroke-width=\"1\">\n"
        "    <line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{2:.2f}\" y2=\"{1:.2f}\"/>\n"
        "    <line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{0:.2f}\" y2=\"{3:.2f}\"/>\n"
        "  </g>\n",
        kLeft, sy(0.0), sx(t_max), sy(1.0));
    out += "  <g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (int i = 0; i <= 4; ++i) {
        const double s = 0.25 * i;
        out += fmt::format("    <text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"end\">{:.2f}</text>\n", kLeft - 6.0,
                           sy(s) + 4.0, s);
        const double t = t_max * 0.25 * i;
        out += fmt::format("    <text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">{:.1f}</text>\n", sx(t),
                           sy(0.0) + 16.0, t);
    }
    out += fmt::format("    <text x=\"{:.2f}\" y=\"{:.2f}\" text-anchor=\"middle\">time (months)</text>\n",
                       kLeft + pw / 2.0, kHeight - 10.0);
    out += fmt::format(
        "    <text x=\"14\" y=\"{:.2f}\" text-anchor=\"middle\" transform=\"rotate(-90 14 {:.2f})\">survival "
        "probability</text>\n",
        kTop + ph / 2.0, kTop + ph / 2.0);
    out += "  </g>\n";

    for (std::size_t g = 0; g < 3; ++g) {
        const auto& c = curves[g];
        std::string pts = fmt::format("{:.2f},{:.2f}", sx(0.0), sy(1.0));
        double s = 1.0;
        for (std::size_t k = 0; k < c.event_times.size(); ++k) {
            const double x = sx(c.event_times[k]);
            pts += fmt::format(" {:.2f},{:.2f} {:.2f},{:.2f}", x, sy(s), x, sy(c.survival[k]));
            s = c.survival[k];
        }
        pts += fmt::format(" {:.2f},{:.2f}", sx(t_max), sy(s));
        out += fmt::format("  <polyline fill=\"none\" stroke=\"{}\" stroke-width=\"2\" points=\"{}\"/>\n", kColours[g],
                           pts);
    }

    out += "  <g font-family=\"sans-serif\" font-size=\"12\">\n";
    for (std::size_t g = 0; g < 3; ++g) {
        const double y = kTop + 16.0 + 18.0 * static_cast<double>(g);
        out += fmt::format(
            "    <line x1=\"{0:.2f}\" y1=\"{1:.2f}\" x2=\"{2:.2f}\" y2=\"{1:.2f}\" stroke=\"{3}\" stroke-width=\"2\"/>\n",
            kWidth - 170.0, y - 4.0, kWidth - 150.0, kColours[g]);
        out += fmt::format("    <text x=\"{:.2f}\" y=\"{:.2f}\">{}</text>\n", kWidth - 144.0, y, kLabels[g]);
    }
    out += fmt::format("    <text x=\"{:.2f}\" y=\"{:.2f}\">log-rank p = {:.3g}</text>\n", kWidth - 170.0,
                       kTop + 16.0 + 18.0 * 3.0, p_value);
    out += "  </g>\n</svg>\n";
    return out;
}

}  // namespace mifi::cli
