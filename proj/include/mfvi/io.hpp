#pragma once

// Plain-text data formats: numeric CSV and UCI bag-of-words corpora.
// Readers report malformed input as DataFormatError with a 1-based line.

#include <Eigen/Core>

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "mfvi/lda.hpp"

namespace mfvi::io {

struct CsvTable {
  std::vector<std::string> header; // empty when the file has none
  Eigen::MatrixXd values;
};

/// Comma-separated numbers, one row per line. A first line containing any
/// non-numeric field is taken as a header. Blank lines are skipped. All rows
/// must have the same width and every value must be finite.
[[nodiscard]] CsvTable read_csv(std::istream &in);
[[nodiscard]] CsvTable read_csv(const std::filesystem::path &path);

/// 17 significant digits.
void write_csv(std::ostream &out, const Eigen::MatrixXd &values,
               const std::vector<std::string> &header = {});

/// UCI bag-of-words: lines `D`, `V`, `NNZ`, then NNZ triples
/// `docID termID count`, all 1-based.
[[nodiscard]] lda::Corpus read_uci_corpus(std::istream &in);
[[nodiscard]] lda::Corpus read_uci_corpus(const std::filesystem::path &path);
void write_uci_corpus(std::ostream &out, const lda::Corpus &corpus);

/// Opens for reading; a missing file is a DataFormatError at line 0.
[[nodiscard]] std::ifstream open_input(const std::filesystem::path &path);

} // namespace mfvi::io
