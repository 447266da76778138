#include "maskprune/fisher.hpp"

#include "maskprune/tensor_io.hpp"

#include <json.hpp>

#include <fstream>
#include <sstream>
#include <stdexcept>

namespace maskprune {

namespace {

void check_grads(const std::vector<Vector>& grads, const ModelShape& shape) {
  if (grads.empty()) throw std::invalid_argument("fisher: no gradient samples");
  for (const auto& g : grads) {
    if (g.size() != shape.mask_count()) throw std::invalid_argument("fisher: gradient length mismatch");
    if (!g.allFinite()) throw std::invalid_argument("fisher: non-finite gradient");
  }
}

Index head_offset(const ModelShape& s, Index l) { return l * (s.heads + s.filters); }
Index filter_offset(const ModelShape& s, Index l) { return l * (s.heads + s.filters) + s.heads; }

}  // namespace

FisherDiagonal fisher_diagonal(const std::vector<Vector>& grads, const ModelShape& shape) {
  check_grads(grads, shape);
  Vector acc = Vector::Zero(shape.mask_count());
  for (const auto& g : grads) acc += g.cwiseAbs2();
  acc *= 1.0 / static_cast<double>(grads.size());

  FisherDiagonal d;
  d.head_scores.resize(shape.layers, shape.heads);
  d.filter_scores.resize(shape.layers, shape.filters);
  for (Index l = 0; l < shape.layers; ++l) {
    d.head_scores.row(l) = acc.segment(head_offset(shape, l), shape.heads).transpose();
    d.filter_scores.row(l) = acc.segment(filter_offset(shape, l), shape.filters).transpose();
  }
  return d;
}

FisherBlocks fisher_blocks(const std::vector<Vector>& grads, const ModelShape& shape) {
  check_grads(grads, shape);
  FisherBlocks b;
  b.head_blocks.assign(shape.layers, Matrix::Zero(shape.heads, shape.heads));
  b.filter_blocks.assign(shape.layers, Matrix::Zero(shape.filters, shape.filters));
  for (const auto& g : grads) {
    for (Index l = 0; l < shape.layers; ++l) {
      const auto gh = g.segment(head_offset(shape, l), shape.heads);
      const auto gf = g.segment(filter_offset(shape, l), shape.filters);
      b.head_blocks[l].noalias() += gh * gh.transpose();
      b.filter_blocks[l].noalias() += gf * gf.transpose();
    }
  }
  const double inv = 1.0 / static_cast<double>(grads.size());
  for (auto& m : b.head_blocks) m *= inv;
  for (auto& m : b.filter_blocks) m *= inv;
  return b;
}

FisherDiagonal diagonal_of(const FisherBlocks& blocks) {
  const auto layers = static_cast<Index>(blocks.head_blocks.size());
  FisherDiagonal d;
  d.head_scores.resize(layers, layers ? blocks.head_blocks[0].rows() : 0);
  d.filter_scores.resize(layers, layers ? blocks.filter_blocks[0].rows() : 0);
  for (Index l = 0; l < layers; ++l) {
    d.head_scores.row(l) = blocks.head_blocks[l].diagonal().transpose();
    d.filter_scores.row(l) = blocks.filter_blocks[l].diagonal().transpose();
  }
  return d;
}

namespace {

namespace fs = std::filesystem;

void write_blocks(const fs::path& path, const std::vector<Matrix>& blocks) {
  const Index n = blocks.empty() ? 0 : blocks[0].rows();
  std::vector<double> values;
  values.reserve(blocks.size() * n * n);
  for (const auto& m : blocks)
    for (Index r = 0; r < n; ++r)
      for (Index c = 0; c < n; ++c) values.push_back(m(r, c));
  const std::vector<std::uint64_t> dims = {blocks.size(), static_cast<std::uint64_t>(n),
                                           static_cast<std::uint64_t>(n)};
  write_tensor(path, dims, values);
}

std::vector<Matrix> read_blocks(const fs::path& path) {
  const Tensor t = read_tensor(path);
  if (t.dims.size() != 3 || t.dims[1] != t.dims[2]) throw std::runtime_error("bad block tensor " + path.string());
  const auto n = static_cast<Index>(t.dims[1]);
  std::vector<Matrix> out;
  for (std::uint64_t l = 0; l < t.dims[0]; ++l)
    out.push_back(Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
        t.values.data() + l * n * n, n, n));
  return out;
}

}  // namespace

void save_fisher(const FisherDiagonal& diag, const FisherBlocks* blocks, const fs::path& dir) {
  fs::create_directories(dir);
  write_matrix(dir / "head_scores.pkt", diag.head_scores);
  write_matrix(dir / "filter_scores.pkt", diag.filter_scores);
  nlohmann::ordered_json manifest;
  manifest["layers"] = diag.layers();
  manifest["heads"] = diag.heads();
  manifest["filters"] = diag.filters();
  manifest["diagonal"] = {{"heads", "head_scores.pkt"}, {"filters", "filter_scores.pkt"}};
  if (blocks) {
    write_blocks(dir / "head_blocks.pkt", blocks->head_blocks);
    write_blocks(dir / "filter_blocks.pkt", blocks->filter_blocks);
    manifest["blocks"] = {{"heads", "head_blocks.pkt"}, {"filters", "filter_blocks.pkt"}};
  }
  write_file_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

FisherDiagonal load_fisher_diagonal(const fs::path& dir) {
  FisherDiagonal d;
  d.head_scores = read_matrix(dir / "head_scores.pkt");
  d.filter_scores = read_matrix(dir / "filter_scores.pkt");
  if (d.head_scores.rows() != d.filter_scores.rows()) throw std::runtime_error("fisher files disagree on layers");
  return d;
}

FisherBlocks load_fisher_blocks(const fs::path& dir) {
  FisherBlocks b;
  b.head_blocks = read_blocks(dir / "head_blocks.pkt");
  b.filter_blocks = read_blocks(dir / "filter_blocks.pkt");
  return b;
}

}  // namespace maskprune
