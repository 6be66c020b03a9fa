// Explicit instantiations of the value-type templates for float and double.
// Building this file checks every public header in a single translation unit.
#include "mink/augment.hpp"
#include "mink/autograd.hpp"
#include "mink/config.hpp"
#include "mink/coords.hpp"
#include "mink/crf.hpp"
#include "mink/io.hpp"
#include "mink/kernel.hpp"
#include "mink/matrix.hpp"
#include "mink/metrics.hpp"
#include "mink/net.hpp"
#include "mink/pipeline.hpp"
#include "mink/sparse_ops.hpp"
#include "mink/synth.hpp"

namespace mink {

template class Matrix<float>;
template class Matrix<double>;
template struct SparseTensor<float>;
template struct SparseTensor<double>;
template class ConvWeights<float>;
template class ConvWeights<double>;
template class BasicCoordinateMap<CoordinateHash>;

}  // namespace mink
