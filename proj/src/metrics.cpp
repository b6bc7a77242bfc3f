#include "ptdr/metrics.hpp"

#include <fstream>

#include "ptdr/errors.hpp"

namespace ptdr {

std::int64_t ConfusionMatrix::total() const {
  std::int64_t n = 0;
  for (std::int64_t v : counts) n += v;
  return n;
}

ConfusionMatrix& ConfusionMatrix::operator+=(const ConfusionMatrix& other) {
  if (other.num_classes != num_classes)
    throw ContractError("confusion matrix merge: class counts differ");
  for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += other.counts[i];
  return *this;
}

void accumulate(ConfusionMatrix& cm, const IntTensor& pred, const IntTensor& gt) {
  if (pred.shape != gt.shape)
    throw ContractError("accumulate: prediction shape " + shape_str(pred.shape) +
                        " does not match ground truth " + shape_str(gt.shape));
  const int C = cm.num_classes;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const std::int32_t g = gt.data[i];
    const std::int32_t p = pred.data[i];
    if (g < 0 || g >= C || p < 0 || p >= C)
      throw ContractError("accumulate: class value outside [0, " + std::to_string(C) + ")");
    ++cm.counts[static_cast<std::size_t>(g) * C + static_cast<std::size_t>(p)];
  }
}

bool class_iou(const ConfusionMatrix& cm, int cls, double& iou) {
  const int C = cm.num_classes;
  const std::int64_t tp = cm.at(cls, cls);
  std::int64_t row = 0, col = 0;
  for (int j = 0; j < C; ++j) {
    row += cm.at(cls, j);
    col += cm.at(j, cls);
  }
  const std::int64_t uni = row + col - tp;
  if (uni == 0) return false;
  iou = static_cast<double>(tp) / static_cast<double>(uni);
  return true;
}

double miou(const ConfusionMatrix& cm) {
  double total = 0.0;
  int scored = 0;
  for (int c = 0; c < cm.num_classes; ++c) {
    double iou;
    if (class_iou(cm, c, iou)) {
      total += iou;
      ++scored;
    }
  }
  if (scored == 0) throw MetricError("miou: no class has a non-empty union");
  return total / scored;
}

void write_iou_csv(const ConfusionMatrix& cm, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open " + path + " for writing");
  out << "class,iou\n";
  for (int c = 0; c < cm.num_classes; ++c) {
    double iou;
    if (class_iou(cm, c, iou)) out << c << ',' << iou << '\n';
  }
  out << "miou," << miou(cm) << '\n';
}

}  // namespace ptdr
