#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>

#include "mfvi/errors.hpp"
#include "mfvi/io.hpp"

using namespace mfvi;
using namespace mfvi::io;

namespace {

std::size_t csv_error_line(const std::string &text) {
  std::istringstream in(text);
  try {
    (void)read_csv(in);
  } catch (const DataFormatError &e) {
    return e.line();
  }
  return 0;
}

std::size_t uci_error_line(const std::string &text) {
  std::istringstream in(text);
  try {
    (void)read_uci_corpus(in);
  } catch (const DataFormatError &e) {
    return e.line();
  }
  return 0;
}

} // namespace

TEST_CASE("csv with and without header") {
  std::istringstream plain("1,2\n3.5,-4e-3\n");
  const auto a = read_csv(plain);
  CHECK(a.header.empty());
  CHECK(a.values.rows() == 2);
  CHECK(a.values(1, 1) == -4e-3);

  std::istringstream headed("x, y\n\n1,2\n  +3 ,4\n");
  const auto b = read_csv(headed);
  CHECK(b.header == std::vector<std::string>{"x", "y"});
  CHECK(b.values.rows() == 2);
  CHECK(b.values(1, 0) == 3.0);

  std::istringstream empty("");
  CHECK(read_csv(empty).values.size() == 0);
}

TEST_CASE("csv errors carry the offending line") {
  CHECK(csv_error_line("1,2\n3\n") == 2);
  CHECK(csv_error_line("a,b\n1,2\n\n1,x\n") == 4);
  CHECK(csv_error_line("1,2\n1,inf\n") == 2);
  CHECK(csv_error_line("1,2\n3,nan\n") == 2);
  CHECK(csv_error_line("1,2\n3,\n") == 2);
  CHECK_THROWS_AS((void)read_csv(std::filesystem::path("/nonexistent/file.csv")),
                  DataFormatError);
}

TEST_CASE("csv round trip is exact") {
  std::mt19937_64 rng(1);
  std::normal_distribution<double> nd(0.0, 1e3);
  Eigen::MatrixXd m(7, 3);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = nd(rng) * std::pow(10.0, static_cast<double>(i % 9) - 4.0);
  }
  std::stringstream s;
  write_csv(s, m, {"a", "b", "c"});
  const auto t = read_csv(s);
  CHECK(t.header.size() == 3);
  CHECK(t.values == m);
}

TEST_CASE("uci corpus parsing") {
  std::istringstream in("3\n4\n3\n1 1 2\n1 4 1\n3 2 5\n");
  const auto c = read_uci_corpus(in);
  CHECK(c.num_docs() == 3);
  CHECK(c.vocab == 4);
  CHECK(c.docs[0].terms.size() == 2);
  CHECK(c.docs[0].terms[1].term == 3);
  CHECK(c.docs[1].terms.empty());
  CHECK(c.docs[2].terms[0].count == 5);

  CHECK(uci_error_line("2\nx\n") == 2);
  CHECK(uci_error_line("1\n2\n") == 3);
  CHECK(uci_error_line("1\n2\n1\n1 3 1\n") == 4);
  CHECK(uci_error_line("1\n2\n1\n2 1 1\n") == 4);
  CHECK(uci_error_line("1\n2\n1\n1 1 0\n") == 4);
  CHECK(uci_error_line("1\n2\n1\n1 1\n") == 4);
  CHECK(uci_error_line("1\n2\n2\n1 1 1\n") == 4);
}

TEST_CASE("uci round trip") {
  const auto sim = lda::simulate_corpus(3, 12, 20, 15, 2);
  std::stringstream s;
  write_uci_corpus(s, sim.corpus);
  const auto back = read_uci_corpus(s);
  REQUIRE(back.num_docs() == sim.corpus.num_docs());
  CHECK(back.vocab == sim.corpus.vocab);
  for (std::size_t d = 0; d < back.num_docs(); ++d) {
    REQUIRE(back.docs[d].terms.size() == sim.corpus.docs[d].terms.size());
    for (std::size_t j = 0; j < back.docs[d].terms.size(); ++j) {
      CHECK(back.docs[d].terms[j].term == sim.corpus.docs[d].terms[j].term);
      CHECK(back.docs[d].terms[j].count == sim.corpus.docs[d].terms[j].count);
    }
  }
}
