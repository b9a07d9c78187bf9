#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace tdsm {

// Shortest decimal form of a double that parses back to the identical bits
// (17 significant digits are always sufficient at double precision).
std::string format_double(double v);

// Inverse of format_double; throws ConfigError on malformed input.
double parse_double_string(const std::string& s);

// FNV-1a 64-bit hash of a byte string, as a fixed-width hex string. Used to
// stamp output files with the hash of the canonical config document.
std::string fnv1a_hex(const std::string& bytes);

std::string read_text_file(const std::string& path);
void write_text_file(const std::string& path, const std::string& content);

// One row of a training loss trace.
struct TraceRow {
  long step = 0;
  double loss = 0.0;
  std::string objective;
  unsigned long long seed = 0;
};

// CSV with header `step,loss,objective,seed`; a leading `# config_hash=...`
// comment is written when the hash is non-empty.
void write_loss_trace_csv(const std::string& path,
                          const std::vector<TraceRow>& rows,
                          const std::string& config_hash = "");
std::vector<TraceRow> read_loss_trace_csv(const std::string& path);

}  // namespace tdsm
