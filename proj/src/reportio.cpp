#include "condatlas/reportio.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace condatlas {

uint64_t fnv1a64(const void *data, size_t n) {
  const unsigned char *p = static_cast<const unsigned char *>(data);
  uint64_t h = 0xcbf29ce484222325ULL;
  for (size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

uint64_t fnv1a64_file(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open for checksum: " + path);
  uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof(buf));
    const std::streamsize got = f.gcount();
    for (std::streamsize i = 0; i < got; ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return h;
}

std::string hex64(uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

void write_text_file(const std::string &path, const std::string &content) {
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open for write: " + path);
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!f)
    throw std::runtime_error("write failed: " + path);
}

std::string read_text_file(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot open for read: " + path);
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::string csv_row(const std::vector<std::string> &cells) {
  std::string out;
  for (size_t i = 0; i < cells.size(); ++i) {
    if (i)
      out += ',';
    const std::string &c = cells[i];
    if (c.find_first_of(",\"\n\r") == std::string::npos) {
      out += c;
    } else {
      out += '"';
      for (char ch : c) {
        if (ch == '"')
          out += '"';
        out += ch;
      }
      out += '"';
    }
  }
  out += '\n';
  return out;
}

std::vector<std::string> split_csv_row(const std::string &line) {
  size_t end = line.size();
  if (end && line[end - 1] == '\n')
    --end;
  if (end && line[end - 1] == '\r')
    --end;
  std::vector<std::string> cells;
  std::string cur;
  bool quoted = false;
  for (size_t i = 0; i < end; ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < end && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"' && cur.empty()) {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  cells.push_back(cur);
  return cells;
}

std::string format_double(double v) {
  if (std::abs(v) < 1e15 && v == static_cast<int64_t>(v))
    return std::to_string(static_cast<int64_t>(v));
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  double back = std::strtod(buf, nullptr);
  if (back == v) {
    for (int prec = 1; prec <= 16; ++prec) {
      char s[64];
      std::snprintf(s, sizeof(s), "%.*g", prec, v);
      if (std::strtod(s, nullptr) == v)
        return s;
    }
  }
  return buf;
}

namespace {

std::string svg_escape(const std::string &s) {
  std::string out;
  for (char c : s) {
    if (c == '&')
      out += "&amp;";
    else if (c == '<')
      out += "&lt;";
    else if (c == '>')
      out += "&gt;";
    else
      out += c;
  }
  return out;
}

} // namespace

void write_svg_chart(const std::string &path, const std::string &title, const std::string &x_label,
                     const std::string &y_label, const std::vector<ChartSeries> &series) {
  const int W = 720, H = 480, ML = 70, MR = 150, MT = 50, MB = 55;
  const double pw = W - ML - MR, ph = H - MT - MB;

  double xmin = 0, xmax = 1, ymin = 0, ymax = 1;
  bool any = false;
  for (const ChartSeries &s : series)
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        continue;
      if (!any) {
        xmin = xmax = s.x[i];
        ymin = ymax = s.y[i];
        any = true;
      } else {
        xmin = std::min(xmin, s.x[i]);
        xmax = std::max(xmax, s.x[i]);
        ymin = std::min(ymin, s.y[i]);
        ymax = std::max(ymax, s.y[i]);
      }
    }
  if (xmax <= xmin)
    xmax = xmin + 1;
  if (ymax <= ymin)
    ymax = ymin + 1;
  const double ypad = 0.05 * (ymax - ymin);
  ymin -= ypad;
  ymax += ypad;

  auto px = [&](double x) { return ML + (x - xmin) / (xmax - xmin) * pw; };
  auto py = [&](double y) { return MT + (1.0 - (y - ymin) / (ymax - ymin)) * ph; };

  static const char *palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  std::ostringstream svg;
  svg << "<svg xmlns='http://www.w3.org/2000/svg' width='" << W << "' height='" << H << "'>\n";
  svg << "<rect width='100%' height='100%' fill='white'/>\n";
  svg << "<text x='" << W / 2 << "' y='28' text-anchor='middle' font-size='16' font-family='sans-serif'>"
      << svg_escape(title) << "</text>\n";
  svg << "<rect x='" << ML << "' y='" << MT << "' width='" << pw << "' height='" << ph
      << "' fill='none' stroke='#333'/>\n";
  for (int t = 0; t <= 5; ++t) {
    const double fx = xmin + (xmax - xmin) * t / 5.0;
    const double fy = ymin + (ymax - ymin) * t / 5.0;
    svg << "<line x1='" << px(fx) << "' y1='" << MT + ph << "' x2='" << px(fx) << "' y2='" << MT + ph + 5
        << "' stroke='#333'/>\n";
    svg << "<text x='" << px(fx) << "' y='" << MT + ph + 20
        << "' text-anchor='middle' font-size='11' font-family='sans-serif'>" << format_double(std::round(fx * 100) / 100)
        << "</text>\n";
    svg << "<line x1='" << ML - 5 << "' y1='" << py(fy) << "' x2='" << ML << "' y2='" << py(fy)
        << "' stroke='#333'/>\n";
    svg << "<text x='" << ML - 8 << "' y='" << py(fy) + 4
        << "' text-anchor='end' font-size='11' font-family='sans-serif'>" << format_double(std::round(fy * 1000) / 1000)
        << "</text>\n";
  }
  svg << "<text x='" << ML + pw / 2 << "' y='" << H - 12
      << "' text-anchor='middle' font-size='13' font-family='sans-serif'>" << svg_escape(x_label) << "</text>\n";
  svg << "<text x='18' y='" << MT + ph / 2 << "' text-anchor='middle' font-size='13' font-family='sans-serif' "
      << "transform='rotate(-90 18 " << MT + ph / 2 << ")'>" << svg_escape(y_label) << "</text>\n";

  for (size_t si = 0; si < series.size(); ++si) {
    const ChartSeries &s = series[si];
    const char *color = palette[si % 6];
    std::ostringstream pts;
    for (size_t i = 0; i < s.x.size(); ++i) {
      if (!std::isfinite(s.x[i]) || !std::isfinite(s.y[i]))
        continue;
      pts << px(s.x[i]) << ',' << py(s.y[i]) << ' ';
    }
    svg << "<polyline points='" << pts.str() << "' fill='none' stroke='" << color << "' stroke-width='1.8'/>\n";
    for (size_t i = 0; i < s.x.size(); ++i)
      if (std::isfinite(s.x[i]) && std::isfinite(s.y[i]))
        svg << "<circle cx='" << px(s.x[i]) << "' cy='" << py(s.y[i]) << "' r='2.4' fill='" << color << "'/>\n";
    const double ly = MT + 16 + 18.0 * static_cast<double>(si);
    svg << "<line x1='" << W - MR + 10 << "' y1='" << ly << "' x2='" << W - MR + 34 << "' y2='" << ly
        << "' stroke='" << color << "' stroke-width='2'/>\n";
    svg << "<text x='" << W - MR + 40 << "' y='" << ly + 4 << "' font-size='12' font-family='sans-serif'>"
        << svg_escape(s.name) << "</text>\n";
  }
  svg << "</svg>\n";
  write_text_file(path, svg.str());
}

namespace {

// Central axis-0 slice of one channel as a row-major 2D byte image.
void channel_slice(const Volume &v, int channel, std::vector<unsigned char> &out, int &w, int &h) {
  const std::vector<int> &d = v.grid.dims;
  const float *ch = v.channel(channel);
  int64_t off = 0;
  if (d.size() == 3) {
    h = d[1];
    w = d[2];
    off = static_cast<int64_t>(d[0] / 2) * d[1] * d[2];
  } else {
    h = d[0];
    w = d[1];
  }
  const int64_t n = static_cast<int64_t>(w) * h;
  float lo = ch[off], hi = ch[off];
  for (int64_t i = 0; i < n; ++i) {
    lo = std::min(lo, ch[off + i]);
    hi = std::max(hi, ch[off + i]);
  }
  const float range = hi > lo ? hi - lo : 1.0f;
  out.resize(n);
  for (int64_t i = 0; i < n; ++i)
    out[i] = static_cast<unsigned char>(std::lround(255.0f * (ch[off + i] - lo) / range));
}

} // namespace

void write_pgm(const std::string &path, const Volume &v, int channel) {
  std::vector<unsigned char> pix;
  int w = 0, h = 0;
  channel_slice(v, channel, pix, w, h);
  std::ostringstream ss;
  ss << "P5\n" << w << ' ' << h << "\n255\n";
  std::string head = ss.str();
  std::string body(reinterpret_cast<const char *>(pix.data()), pix.size());
  write_text_file(path, head + body);
}

void write_montage_pgm(const std::string &path, const std::vector<const Volume *> &vols,
                       const std::vector<int> &channels) {
  if (vols.empty() || vols.size() != channels.size())
    throw std::invalid_argument("montage: need one channel index per volume");
  std::vector<std::vector<unsigned char>> tiles(vols.size());
  int w = 0, h = 0;
  for (size_t i = 0; i < vols.size(); ++i) {
    int tw = 0, th = 0;
    channel_slice(*vols[i], channels[i], tiles[i], tw, th);
    if (i == 0) {
      w = tw;
      h = th;
    } else if (tw != w || th != h) {
      throw std::invalid_argument("montage: tile sizes differ");
    }
  }
  const int gap = 2;
  const int W = static_cast<int>(vols.size()) * w + (static_cast<int>(vols.size()) - 1) * gap;
  std::vector<unsigned char> canvas(static_cast<size_t>(W) * h, 255);
  for (size_t t = 0; t < tiles.size(); ++t) {
    const int x0 = static_cast<int>(t) * (w + gap);
    for (int y = 0; y < h; ++y)
      std::copy_n(tiles[t].data() + static_cast<int64_t>(y) * w, w,
                  canvas.data() + static_cast<int64_t>(y) * W + x0);
  }
  std::ostringstream ss;
  ss << "P5\n" << W << ' ' << h << "\n255\n";
  write_text_file(path, ss.str() + std::string(reinterpret_cast<const char *>(canvas.data()), canvas.size()));
}

} // namespace condatlas
