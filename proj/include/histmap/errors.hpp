#pragma once

#include <stdexcept>
#include <string>

namespace histmap {

// Base for every error thrown by the library. The message always names the
// operation that failed so CLI error output can point at it directly.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

class ZeroNormRow : public Error {
 public:
  explicit ZeroNormRow(std::size_t row)
      : Error("l2_normalize: row " + std::to_string(row) +
              " has norm <= 1e-12 (ZeroNormRow)"),
        row_(row) {}
  std::size_t row() const { return row_; }

 private:
  std::size_t row_;
};

class DimensionMismatch : public Error {
 public:
  explicit DimensionMismatch(const std::string& where)
      : Error(where + ": DimensionMismatch") {}
};

class NotNormalized : public Error {
 public:
  explicit NotNormalized(const std::string& where)
      : Error(where + ": input rows are not L2-normalized (NotNormalized)") {}
};

class NoPositives : public Error {
 public:
  NoPositives() : Error("exact_ap: no valid positive entry (NoPositives)") {}
};

class EmptyGallery : public Error {
 public:
  EmptyGallery() : Error("evaluate: gallery is empty (EmptyGallery)") {}
};

class AllQueriesSkipped : public Error {
 public:
  AllQueriesSkipped()
      : Error("evaluate: every query was skipped (AllQueriesSkipped)") {}
};

class IndexOutOfRange : public Error {
 public:
  explicit IndexOutOfRange(const std::string& where)
      : Error(where + ": IndexOutOfRange") {}
};

class NoPositiveQueries : public Error {
 public:
  NoPositiveQueries()
      : Error("soft_map: no query has a positive (NoPositiveQueries)") {}
};

class StateMismatch : public Error {
 public:
  explicit StateMismatch(const std::string& where)
      : Error(where + ": cached state does not match inputs (StateMismatch)") {}
};

class LabelOutOfRange : public Error {
 public:
  explicit LabelOutOfRange(const std::string& where)
      : Error(where + ": LabelOutOfRange") {}
};

class DegenerateBatch : public Error {
 public:
  explicit DegenerateBatch(const std::string& what)
      : Error("batch_hard_triplet_loss: " + what + " (DegenerateBatch)") {}
};

class NonFiniteLoss : public Error {
 public:
  NonFiniteLoss() : Error("combine_losses: non-finite component (NonFiniteLoss)") {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& where)
      : Error(where + ": ShapeMismatch") {}
};

class NonFiniteGradient : public Error {
 public:
  explicit NonFiniteGradient(const std::string& where)
      : Error(where + ": NonFiniteGradient") {}
};

class StaleCache : public Error {
 public:
  explicit StaleCache(const std::string& where)
      : Error(where + ": cache does not belong to this forward pass (StaleCache)") {}
};

class TooFewIdentities : public Error {
 public:
  TooFewIdentities(std::size_t have, std::size_t need)
      : Error("pk_sampler: dataset has " + std::to_string(have) +
              " identities, need " + std::to_string(need) +
              " (TooFewIdentities)") {}
};

class MissingClothingLabels : public Error {
 public:
  MissingClothingLabels()
      : Error("relabel_by_clothing: clothing labels missing (MissingClothingLabels)") {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& path, std::size_t line, const std::string& what)
      : Error("load_labeled_set: " + path + ":" + std::to_string(line) + ": " +
              what + " (ParseError)"),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

class NonFiniteValue : public Error {
 public:
  NonFiniteValue(std::size_t row, std::size_t col)
      : Error("load_labeled_set: non-finite value at row " +
              std::to_string(row) + ", col " + std::to_string(col) +
              " (NonFiniteValue)"),
        row_(row),
        col_(col) {}
  std::size_t row() const { return row_; }
  std::size_t col() const { return col_; }

 private:
  std::size_t row_, col_;
};

class LabelColumnMissing : public Error {
 public:
  explicit LabelColumnMissing(const std::string& column)
      : Error("load_labeled_set: required column '" + column +
              "' missing (LabelColumnMissing)") {}
};

class ManifestMismatch : public Error {
 public:
  ManifestMismatch(const std::string& field, long declared, long actual)
      : Error("validate_manifest: field '" + field + "' declared " +
              std::to_string(declared) + " but recomputed " +
              std::to_string(actual) + " (ManifestMismatch)") {}
};

class InvalidSpec : public Error {
 public:
  explicit InvalidSpec(const std::string& what)
      : Error("invalid spec: " + what + " (InvalidSpec)") {}
};

class IoError : public Error {
 public:
  explicit IoError(const std::string& what) : Error("io: " + what + " (IoError)") {}
};

}  // namespace histmap
