#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

#include "recticast/cli.hpp"
#include "recticast/errors.hpp"

namespace recticast::cli {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char ch : s) {
        switch (ch) {
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '&': out += "&amp;"; break;
            case '"': out += "&quot;"; break;
            default: out += ch;
        }
    }
    return out;
}

}  // namespace

std::vector<double> read_report_curve(const std::filesystem::path& csv, const std::string& metric) {
    std::ifstream in(csv);
    if (!in) throw FormatError("cannot read report " + csv.string());
    const std::string where = csv.string() + ":";
    std::string line;
    std::size_t line_no = 0;
    if (!std::getline(in, line) || line != "lead,threshold,metric,value") {
        throw FormatError(where + "1: expected header 'lead,threshold,metric,value'");
    }
    line_no = 1;
    std::map<std::size_t, double> values;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv(line);
        if (cells.size() != 4) {
            throw FormatError(where + std::to_string(line_no) + ": expected 4 fields, got " +
                              std::to_string(cells.size()));
        }
        std::size_t lead = 0;
        double value = 0;
        try {
            std::size_t used = 0;
            const long long l = std::stoll(cells[0], &used);
            if (used != cells[0].size() || l < 1) throw std::invalid_argument("lead");
            lead = static_cast<std::size_t>(l);
            value = std::stod(cells[3], &used);
            if (used != cells[3].size()) throw std::invalid_argument("value");
        } catch (const std::exception&) {
            throw FormatError(where + std::to_string(line_no) + ": malformed lead or value in '" + line + "'");
        }
        if (cells[1] == "mean" && cells[2] == metric) values[lead] = value;
    }
    if (values.empty()) return {};
    std::vector<double> curve(values.rbegin()->first, std::numeric_limits<double>::quiet_NaN());
    for (const auto& [lead, v] : values) curve[lead - 1] = v;
    return curve;
}

std::string render_svg(const std::string& metric,
                       const std::vector<std::pair<std::string, std::vector<double>>>& series) {
    static const char* kColors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
    const double width = 640, height = 400, left = 60, right = 170, top = 40, bottom = 50;
    const double pw = width - left - right, ph = height - top - bottom;

    std::size_t leads = 1;
    double lo = 0, hi = 1;
    for (const auto& [_, ys] : series) {
        leads = std::max(leads, ys.size());
        for (double v : ys) {
            if (!std::isfinite(v)) continue;
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
    }
    auto px = [&](std::size_t lead) {
        return left + (leads == 1 ? pw / 2 : pw * static_cast<double>(lead - 1) / static_cast<double>(leads - 1));
    };
    auto py = [&](double v) { return top + ph * (hi - v) / (hi - lo); };

    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << num(left + pw / 2) << "\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" "
       << "font-size=\"16\">" << escape(metric) << " vs lead time</text>\n";
    os << "<g stroke=\"black\" stroke-width=\"1\">\n";
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(top + ph) << "\" x2=\"" << num(left + pw) << "\" y2=\""
       << num(top + ph) << "\"/>\n";
    os << "<line x1=\"" << num(left) << "\" y1=\"" << num(top) << "\" x2=\"" << num(left) << "\" y2=\""
       << num(top + ph) << "\"/>\n</g>\n";
    os << "<g font-family=\"sans-serif\" font-size=\"11\">\n";
    for (std::size_t l = 1; l <= leads; ++l) {
        if (leads > 10 && l % 5 != 0 && l != 1) continue;
        os << "<text x=\"" << num(px(l)) << "\" y=\"" << num(top + ph + 16) << "\" text-anchor=\"middle\">" << l
           << "</text>\n";
    }
    for (int k = 0; k <= 4; ++k) {
        const double v = lo + (hi - lo) * k / 4.0;
        os << "<text x=\"" << num(left - 6) << "\" y=\"" << num(py(v) + 4) << "\" text-anchor=\"end\">" << num(v)
           << "</text>\n";
    }
    os << "<text x=\"" << num(left + pw / 2) << "\" y=\"" << num(height - 10)
       << "\" text-anchor=\"middle\">lead time (frames)</text>\n</g>\n";

    for (std::size_t s = 0; s < series.size(); ++s) {
        const auto& [label, ys] = series[s];
        const char* color = kColors[s % std::size(kColors)];
        std::string points;
        for (std::size_t l = 0; l < ys.size(); ++l) {
            if (!std::isfinite(ys[l])) continue;
            if (!points.empty()) points += ' ';
            points += num(px(l + 1)) + "," + num(py(ys[l]));
        }
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"" << points << "\"/>\n";
        const double ly = top + 10 + 18 * static_cast<double>(s);
        os << "<line x1=\"" << num(left + pw + 15) << "\" y1=\"" << num(ly) << "\" x2=\"" << num(left + pw + 35)
           << "\" y2=\"" << num(ly) << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        os << "<text x=\"" << num(left + pw + 40) << "\" y=\"" << num(ly + 4)
           << "\" font-family=\"sans-serif\" font-size=\"12\">" << escape(label) << "</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace recticast::cli
