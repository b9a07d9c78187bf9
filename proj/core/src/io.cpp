#include "tdsm/io.hpp"

#include <cerrno>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <sstream>

#include "tdsm/errors.hpp"

namespace tdsm {

std::string format_double(double v) {
  // Try increasing precision until the round trip is exact; 17 digits always
  // suffice, shorter forms keep files readable.
  char buf[40];
  for (int prec = 15; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, v);
    if (std::strtod(buf, nullptr) == v) return buf;
  }
  return buf;
}

double parse_double_string(const std::string& s) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end == s.c_str() || (end && *end != '\0') || errno == ERANGE)
    throw ConfigError("malformed numeric literal: '" + s + "'");
  return v;
}

std::string fnv1a_hex(const std::string& bytes) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (unsigned char b : bytes) {
    h ^= b;
    h *= 0x100000001b3ull;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw ConfigError("cannot open for writing: " + path);
  f << content;
  if (!f) throw ConfigError("write failed: " + path);
}

void write_loss_trace_csv(const std::string& path,
                          const std::vector<TraceRow>& rows,
                          const std::string& config_hash) {
  std::ostringstream out;
  if (!config_hash.empty()) out << "# config_hash=" << config_hash << "\n";
  out << "step,loss,objective,seed\n";
  for (const TraceRow& r : rows)
    out << r.step << ',' << format_double(r.loss) << ',' << r.objective << ','
        << r.seed << "\n";
  write_text_file(path, out.str());
}

std::vector<TraceRow> read_loss_trace_csv(const std::string& path) {
  std::istringstream in(read_text_file(path));
  std::vector<TraceRow> rows;
  std::string line;
  bool header_seen = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!header_seen) {
      if (line != "step,loss,objective,seed")
        throw ConfigError("unexpected loss trace header: " + line);
      header_seen = true;
      continue;
    }
    std::istringstream ls(line);
    std::string step, loss, objective, seed;
    if (!std::getline(ls, step, ',') || !std::getline(ls, loss, ',') ||
        !std::getline(ls, objective, ',') || !std::getline(ls, seed))
      throw ConfigError("malformed loss trace row: " + line);
    TraceRow r;
    r.step = std::stol(step);
    r.loss = parse_double_string(loss);
    r.objective = objective;
    r.seed = std::stoull(seed);
    rows.push_back(std::move(r));
  }
  if (!header_seen) throw ConfigError("loss trace has no header: " + path);
  return rows;
}

}  // namespace tdsm
