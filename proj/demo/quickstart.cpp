// Voxelize a random point cloud, run one sparse convolution, then segment it
// with a small MinkUNet.
#include <iostream>
#include <random>

#include "mink/coords.hpp"
#include "mink/kernel.hpp"
#include "mink/net.hpp"
#include "mink/sparse_ops.hpp"

int main() {
  using namespace mink;
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<double> u(0.0, 2.0);

  Matrix<double> points(500, 3), colors(500, 3);
  for (auto& v : points.storage()) v = u(rng);
  for (auto& v : colors.storage()) v = u(rng) - 1.0;
  auto q = quantize<double>(points, colors, {}, 0.25);
  const SparseTensor<double>& x = q.tensor;
  std::cout << points.rows() << " points -> " << x.size() << " voxels\n";

  auto region = KernelRegion::hypercube(3, 3);
  KernelMap same = build_kernel_map(*x.coords, *x.coords, region);
  ConvWeights<double> w(region.volume(), 4, 3);
  for (auto& v : w.storage()) v = u(rng) - 1.0;
  Matrix<double> y = sparse_conv_forward(x.features, w, same, x.size());
  std::cout << "submanifold 3x3x3 conv: " << same.pair_count() << " pairs, output " << y.rows() << "x" << y.cols()
            << "\n";

  auto down = stride_coordinates(*x.coords, 2);
  std::cout << "stride-2 coordinate set: " << down->size() << " voxels\n";

  net::NetworkConfig cfg;
  cfg.classes = 3;
  cfg.width = 4;
  auto model = net::Network::minkunet(cfg);
  std::cout << model.summary();
  Matrix<double> logits = net::predict(model, x);
  std::cout << "logits " << logits.rows() << "x" << logits.cols() << "\n";
}
