#include "pasm/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "pasm/rng.hpp"

namespace pasm {

void Dataset::validate(bool require_finite) const {
  if (rows.size() != labels.size() || rows.size() != group_tags.size()) {
    throw InputError("dataset row, label, and tag counts disagree");
  }
  std::set<std::string> seen(feature_names.begin(), feature_names.end());
  if (seen.size() != feature_names.size()) {
    throw InputError("duplicate feature names");
  }
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i].size() != feature_names.size()) {
      throw InputError("row " + std::to_string(i) + " has the wrong width");
    }
    if (labels[i] != 0 && labels[i] != 1) {
      throw InputError("label outside {0,1} at row " + std::to_string(i));
    }
    if (require_finite) {
      for (double v : rows[i]) {
        if (!std::isfinite(v)) {
          throw InputError("non-finite feature value at row " + std::to_string(i));
        }
      }
    }
  }
  for (const auto& col : demographic_columns) {
    if (std::find(feature_names.begin(), feature_names.end(), col) == feature_names.end()) {
      throw InputError("demographic column '" + col + "' is not a feature");
    }
  }
}

Dataset Dataset::select(const std::vector<int>& indices) const {
  Dataset out;
  out.feature_names = feature_names;
  out.demographic_columns = demographic_columns;
  out.imputation_means = imputation_means;
  out.rows.reserve(indices.size());
  out.labels.reserve(indices.size());
  out.group_tags.reserve(indices.size());
  for (int i : indices) {
    if (i < 0 || static_cast<std::size_t>(i) >= rows.size()) {
      throw InputError("row index out of range in selection");
    }
    out.rows.push_back(rows[static_cast<std::size_t>(i)]);
    out.labels.push_back(labels[static_cast<std::size_t>(i)]);
    out.group_tags.push_back(group_tags[static_cast<std::size_t>(i)]);
  }
  return out;
}

int Dataset::feature_index(const std::string& name) const {
  auto it = std::find(feature_names.begin(), feature_names.end(), name);
  return it == feature_names.end() ? -1 : static_cast<int>(it - feature_names.begin());
}

Eigen::MatrixXd to_matrix(const Dataset& ds) {
  Eigen::MatrixXd X(static_cast<Eigen::Index>(ds.size()), ds.dim());
  for (std::size_t i = 0; i < ds.size(); ++i) {
    for (int j = 0; j < ds.dim(); ++j) {
      X(static_cast<Eigen::Index>(i), j) = ds.rows[i][static_cast<std::size_t>(j)];
    }
  }
  return X;
}

namespace {

std::string trim(const std::string& s) {
  std::size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  std::size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

// One CSV record; quoted fields may contain commas and doubled quotes.
std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> cells;
  std::string cell;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    char c = line[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < line.size() && line[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          quoted = false;
        }
      } else {
        cell += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      cells.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell += c;
    }
  }
  cells.push_back(cell);
  return cells;
}

bool parse_number(const std::string& cell, double* out) {
  const std::string t = trim(cell);
  if (t.empty()) return false;
  const char* begin = t.c_str();
  char* end = nullptr;
  double v = std::strtod(begin, &end);
  if (end != begin + t.size()) return false;
  *out = v;
  return true;
}

}  // namespace

Dataset load_csv(const std::string& path, const CsvSchema& schema) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open '" + path + "'");
  std::string header_line;
  if (!std::getline(in, header_line)) throw InputError("'" + path + "' is empty");
  const std::vector<std::string> header = split_csv_line(header_line);

  auto column_of = [&](const std::string& name) {
    for (std::size_t i = 0; i < header.size(); ++i) {
      if (trim(header[i]) == name) return static_cast<int>(i);
    }
    return -1;
  };

  const int label_col = column_of(schema.label_column);
  if (label_col < 0) throw InputError("schema error: missing label column '" + schema.label_column + "'");
  const int tag_col = column_of(schema.tag_column);
  if (tag_col < 0) throw InputError("schema error: missing tag column '" + schema.tag_column + "'");

  std::vector<std::string> feature_cols = schema.feature_columns;
  if (feature_cols.empty()) {
    for (const auto& raw : header) {
      const std::string name = trim(raw);
      if (name != schema.label_column && name != schema.tag_column) feature_cols.push_back(name);
    }
  }
  if (feature_cols.empty()) throw InputError("schema error: no feature columns");
  std::vector<int> feature_idx;
  for (const auto& name : feature_cols) {
    int c = column_of(name);
    if (c < 0) throw InputError("schema error: missing feature column '" + name + "'");
    feature_idx.push_back(c);
  }

  Dataset ds;
  ds.feature_names = feature_cols;
  ds.demographic_columns = schema.demographic_columns;

  std::string line;
  int row_number = 1;  // header is row 0
  while (std::getline(in, line)) {
    if (trim(line).empty()) {
      ++row_number;
      continue;
    }
    std::vector<std::string> cells = split_csv_line(line);
    cells.resize(header.size());  // short records read as missing cells

    const std::string label_cell = trim(cells[static_cast<std::size_t>(label_col)]);
    if (label_cell.empty()) {
      ++ds.dropped_rows;
      ++row_number;
      continue;
    }
    double label_value;
    if (!parse_number(label_cell, &label_value)) {
      auto code_map = schema.codebook.find(schema.label_column);
      if (code_map != schema.codebook.end()) {
        auto code = code_map->second.find(label_cell);
        if (code == code_map->second.end()) {
          throw InputError("parse error at row " + std::to_string(row_number) + ", column '" +
                           schema.label_column + "': no code for '" + label_cell + "'");
        }
        label_value = code->second;
      } else {
        throw InputError("parse error at row " + std::to_string(row_number) + ", column '" +
                         schema.label_column + "': non-numeric value '" + label_cell + "'");
      }
    }
    if (label_value != 0.0 && label_value != 1.0) {
      throw InputError("label outside {0,1} at row " + std::to_string(row_number));
    }

    std::vector<double> row(feature_cols.size());
    for (std::size_t f = 0; f < feature_cols.size(); ++f) {
      const std::string cell = trim(cells[static_cast<std::size_t>(feature_idx[f])]);
      if (cell.empty()) {
        row[f] = std::numeric_limits<double>::quiet_NaN();
        continue;
      }
      double v;
      if (parse_number(cell, &v)) {
        if (!std::isfinite(v)) {
          throw InputError("non-finite value at row " + std::to_string(row_number) +
                           ", column '" + feature_cols[f] + "'");
        }
        row[f] = v;
        continue;
      }
      auto code_map = schema.codebook.find(feature_cols[f]);
      if (code_map == schema.codebook.end()) {
        throw InputError("parse error at row " + std::to_string(row_number) + ", column '" +
                         feature_cols[f] + "': non-numeric value '" + cell + "'");
      }
      auto code = code_map->second.find(cell);
      if (code == code_map->second.end()) {
        throw InputError("parse error at row " + std::to_string(row_number) + ", column '" +
                         feature_cols[f] + "': no code for '" + cell + "'");
      }
      row[f] = code->second;
    }

    ds.rows.push_back(std::move(row));
    ds.labels.push_back(static_cast<int>(label_value));
    ds.group_tags.push_back(trim(cells[static_cast<std::size_t>(tag_col)]));
    ++row_number;
  }

  ds.validate(/*require_finite=*/false);
  return ds;
}

void SplitSpec::validate(const Dataset& ds) const {
  if (expert_train_fraction <= 0.0 || expert_train_fraction >= 1.0) {
    throw InputError("expert_train_fraction must lie in (0,1)");
  }
  if (calibration_shots < 0) throw InputError("calibration_shots must be non-negative");
  for (const auto& tag : source_tags) {
    if (tag == target_tag) throw InputError("target tag '" + tag + "' also listed as source");
  }
  long target_rows = std::count(ds.group_tags.begin(), ds.group_tags.end(), target_tag);
  if (calibration_shots > target_rows) {
    throw InputError("calibration_shots exceeds the " + std::to_string(target_rows) +
                     " target rows");
  }
}

Splits make_splits(const Dataset& ds, const SplitSpec& spec) {
  ds.validate(/*require_finite=*/false);
  spec.validate(ds);

  std::vector<int> source_idx, target_idx;
  for (std::size_t i = 0; i < ds.size(); ++i) {
    const std::string& tag = ds.group_tags[i];
    if (tag == spec.target_tag) {
      target_idx.push_back(static_cast<int>(i));
    } else if (std::find(spec.source_tags.begin(), spec.source_tags.end(), tag) !=
               spec.source_tags.end()) {
      source_idx.push_back(static_cast<int>(i));
    }
  }
  if (source_idx.empty()) throw InputError("empty source after tag filtering");

  auto rng_src = make_rng(spec.seed, 1);
  std::shuffle(source_idx.begin(), source_idx.end(), rng_src);
  const int n_train = static_cast<int>(
      std::floor(spec.expert_train_fraction * static_cast<double>(source_idx.size()) + 0.5));

  Splits out;
  out.expert_train_idx.assign(source_idx.begin(), source_idx.begin() + n_train);
  out.source_val_idx.assign(source_idx.begin() + n_train, source_idx.end());

  auto rng_tgt = make_rng(spec.seed, 2);
  std::shuffle(target_idx.begin(), target_idx.end(), rng_tgt);
  out.calibration_idx.assign(target_idx.begin(), target_idx.begin() + spec.calibration_shots);
  out.target_test_idx.assign(target_idx.begin() + spec.calibration_shots, target_idx.end());

  std::sort(out.expert_train_idx.begin(), out.expert_train_idx.end());
  std::sort(out.source_val_idx.begin(), out.source_val_idx.end());
  std::sort(out.calibration_idx.begin(), out.calibration_idx.end());
  std::sort(out.target_test_idx.begin(), out.target_test_idx.end());

  out.expert_train = ds.select(out.expert_train_idx);
  out.source_val = ds.select(out.source_val_idx);
  out.calibration = ds.select(out.calibration_idx);
  out.target_test = ds.select(out.target_test_idx);

  // Imputation means come from the expert training split alone.
  const int d = ds.dim();
  std::vector<double> means(static_cast<std::size_t>(d), 0.0);
  std::vector<long> counts(static_cast<std::size_t>(d), 0);
  for (const auto& row : out.expert_train.rows) {
    for (int j = 0; j < d; ++j) {
      if (std::isfinite(row[static_cast<std::size_t>(j)])) {
        means[static_cast<std::size_t>(j)] += row[static_cast<std::size_t>(j)];
        ++counts[static_cast<std::size_t>(j)];
      }
    }
  }
  for (int j = 0; j < d; ++j) {
    means[static_cast<std::size_t>(j)] =
        counts[static_cast<std::size_t>(j)] > 0
            ? means[static_cast<std::size_t>(j)] / static_cast<double>(counts[static_cast<std::size_t>(j)])
            : 0.0;
  }
  auto impute = [&](Dataset& part) {
    part.imputation_means = means;
    for (auto& row : part.rows) {
      for (int j = 0; j < d; ++j) {
        if (!std::isfinite(row[static_cast<std::size_t>(j)])) {
          row[static_cast<std::size_t>(j)] = means[static_cast<std::size_t>(j)];
        }
      }
    }
    part.validate(/*require_finite=*/true);
  };
  impute(out.expert_train);
  impute(out.source_val);
  impute(out.calibration);
  impute(out.target_test);
  return out;
}

}  // namespace pasm
