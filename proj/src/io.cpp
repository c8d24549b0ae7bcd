#include "mfvi/io.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <ostream>
#include <sstream>

#include "mfvi/errors.hpp"

namespace mfvi::io {

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) {
    return {};
  }
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

bool parse_double(std::string_view s, double &out) {
  s = trim(s);
  if (!s.empty() && s.front() == '+') {
    s.remove_prefix(1);
  }
  if (s.empty()) {
    return false;
  }
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

std::vector<std::string_view> split(std::string_view line, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto pos = line.find(sep, start);
    out.push_back(line.substr(start, pos - start));
    if (pos == std::string_view::npos) {
      break;
    }
    start = pos + 1;
  }
  return out;
}

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) {
      ++i;
    }
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) {
      ++i;
    }
    if (i > start) {
      out.push_back(line.substr(start, i - start));
    }
  }
  return out;
}

bool parse_count(std::string_view s, std::size_t &out) {
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
  return ec == std::errc{} && ptr == s.data() + s.size();
}

} // namespace

std::ifstream open_input(const std::filesystem::path &path) {
  std::ifstream in(path);
  if (!in) {
    throw DataFormatError(0, "cannot open " + path.string());
  }
  return in;
}

CsvTable read_csv(std::istream &in) {
  CsvTable table;
  std::vector<double> flat;
  std::size_t width = 0;
  std::size_t rows = 0;
  std::string line;
  std::size_t lineno = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) {
      continue;
    }
    const auto fields = split(line, ',');
    std::vector<double> row(fields.size());
    bool numeric = true;
    for (std::size_t j = 0; j < fields.size(); ++j) {
      if (!parse_double(fields[j], row[j])) {
        numeric = false;
        break;
      }
    }
    if (first && !numeric) {
      for (auto f : fields) {
        table.header.emplace_back(trim(f));
      }
      width = fields.size();
      first = false;
      continue;
    }
    first = false;
    if (!numeric) {
      throw DataFormatError(lineno, "non-numeric field");
    }
    if (width == 0) {
      width = row.size();
    } else if (row.size() != width) {
      throw DataFormatError(lineno, "expected " + std::to_string(width) +
                                        " fields, found " +
                                        std::to_string(row.size()));
    }
    for (double v : row) {
      if (!std::isfinite(v)) {
        throw DataFormatError(lineno, "non-finite value");
      }
    }
    flat.insert(flat.end(), row.begin(), row.end());
    ++rows;
  }
  table.values.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(width));
  for (std::size_t i = 0; i < rows; ++i) {
    for (std::size_t j = 0; j < width; ++j) {
      table.values(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) =
          flat[i * width + j];
    }
  }
  return table;
}

CsvTable read_csv(const std::filesystem::path &path) {
  std::ifstream in = open_input(path);
  return read_csv(in);
}

void write_csv(std::ostream &out, const Eigen::MatrixXd &values,
               const std::vector<std::string> &header) {
  const auto old = out.precision(17);
  if (!header.empty()) {
    for (std::size_t j = 0; j < header.size(); ++j) {
      out << (j ? "," : "") << header[j];
    }
    out << '\n';
  }
  for (Eigen::Index i = 0; i < values.rows(); ++i) {
    for (Eigen::Index j = 0; j < values.cols(); ++j) {
      out << (j ? "," : "") << values(i, j);
    }
    out << '\n';
  }
  out.precision(old);
}

lda::Corpus read_uci_corpus(std::istream &in) {
  std::string line;
  std::size_t lineno = 0;
  std::size_t header[3] = {0, 0, 0};
  std::size_t got = 0;
  while (got < 3 && std::getline(in, line)) {
    ++lineno;
    const auto t = trim(line);
    if (t.empty()) {
      continue;
    }
    if (!parse_count(t, header[got])) {
      throw DataFormatError(lineno, "expected a nonnegative integer header value");
    }
    ++got;
  }
  if (got < 3) {
    throw DataFormatError(lineno + 1, "missing D, V, NNZ header");
  }
  lda::Corpus corpus;
  corpus.docs.resize(header[0]);
  corpus.vocab = header[1];
  std::size_t nnz = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto fields = split_ws(line);
    if (fields.empty()) {
      continue;
    }
    std::size_t doc = 0;
    std::size_t term = 0;
    std::size_t count = 0;
    if (fields.size() != 3 || !parse_count(fields[0], doc) ||
        !parse_count(fields[1], term) || !parse_count(fields[2], count)) {
      throw DataFormatError(lineno, "expected `docID termID count`");
    }
    if (doc == 0 || doc > header[0]) {
      throw DataFormatError(lineno, "document id out of range");
    }
    if (term == 0 || term > header[1]) {
      throw DataFormatError(lineno, "term id out of range");
    }
    if (count == 0) {
      throw DataFormatError(lineno, "count must be positive");
    }
    corpus.docs[doc - 1].terms.push_back({term - 1, count});
    ++nnz;
  }
  if (nnz != header[2]) {
    throw DataFormatError(lineno, "header declares " + std::to_string(header[2]) +
                                      " entries, found " + std::to_string(nnz));
  }
  return corpus;
}

lda::Corpus read_uci_corpus(const std::filesystem::path &path) {
  std::ifstream in = open_input(path);
  return read_uci_corpus(in);
}

void write_uci_corpus(std::ostream &out, const lda::Corpus &corpus) {
  std::size_t nnz = 0;
  for (const auto &doc : corpus.docs) {
    nnz += doc.terms.size();
  }
  out << corpus.num_docs() << '\n' << corpus.vocab << '\n' << nnz << '\n';
  for (std::size_t d = 0; d < corpus.num_docs(); ++d) {
    for (const auto &tc : corpus.docs[d].terms) {
      out << d + 1 << ' ' << tc.term + 1 << ' ' << tc.count << '\n';
    }
  }
}

} // namespace mfvi::io
