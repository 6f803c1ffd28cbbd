#pragma once

#include <algorithm>
#include <cstddef>
#include <ostream>
#include <string>
#include <vector>

#include "matchrec/corpus.hpp"
#include "matchrec/embeddings.hpp"
#include "matchrec/error.hpp"

namespace matchrec {

/// Dense row-major n_max x m_max cosine grid. Entries outside
/// [0, valid_rows) x [0, valid_cols) are padding and hold 0.
template <typename T>
struct MatchingMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::size_t valid_rows = 0;
  std::size_t valid_cols = 0;
  std::vector<T> values;

  T at(std::size_t p, std::size_t q) const { return values[p * cols + q]; }
};

/// Embedding vectors and norms for the first `cap` tokens of a document.
struct DocumentVectors {
  std::vector<std::vector<double>> vectors;
  std::vector<double> norms;

  std::size_t size() const noexcept { return vectors.size(); }
};

/// Keeps the first `cap` tokens of the flattened document.
inline DocumentVectors resolve_document(const Document& doc, const EmbeddingTable& table,
                                        std::size_t cap) {
  DocumentVectors out;
  for (const auto& review : doc.reviews) {
    for (const auto& token : review) {
      if (out.vectors.size() == cap) return out;
      out.vectors.push_back(table.lookup(token));
      out.norms.push_back(norm(out.vectors.back()));
    }
  }
  return out;
}

template <typename T = double>
MatchingMatrix<T> build_matching_matrix(const DocumentVectors& user, const DocumentVectors& item,
                                        std::size_t n_max, std::size_t m_max) {
  if (n_max == 0 || m_max == 0) throw InputError("matching matrix caps must be >= 1");
  MatchingMatrix<T> M;
  M.rows = n_max;
  M.cols = m_max;
  M.valid_rows = std::min(user.size(), n_max);
  M.valid_cols = std::min(item.size(), m_max);
  M.values.assign(n_max * m_max, T(0));
  for (std::size_t p = 0; p < M.valid_rows; ++p) {
    const auto& a = user.vectors[p];
    for (std::size_t q = 0; q < M.valid_cols; ++q) {
      const double c = cosine_from_parts(dot(a, item.vectors[q]), user.norms[p], item.norms[q]);
      M.values[p * m_max + q] = static_cast<T>(c);
    }
  }
  return M;
}

/// Entry (p, q) is the cosine of the p-th user-document token and q-th
/// item-document token. Documents longer than the caps are truncated at the
/// end; shorter ones are zero padded.
template <typename T = double>
MatchingMatrix<T> build_matching_matrix(const Document& user_doc, const Document& item_doc,
                                        const EmbeddingTable& table, std::size_t n_max,
                                        std::size_t m_max) {
  return build_matching_matrix<T>(resolve_document(user_doc, table, n_max),
                                  resolve_document(item_doc, table, m_max), n_max, m_max);
}

/// Debug dump: one CSV row per matrix row.
template <typename T>
void write_matrix_csv(std::ostream& os, const MatchingMatrix<T>& M) {
  for (std::size_t p = 0; p < M.rows; ++p) {
    for (std::size_t q = 0; q < M.cols; ++q) {
      if (q) os << ',';
      os << M.at(p, q);
    }
    os << '\n';
  }
}

}  // namespace matchrec
