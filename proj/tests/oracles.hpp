#pragma once

// Straight-line reference implementations on plain nested vectors. They share
// no code with the tape so they can serve as independent oracles.

#include <cmath>
#include <functional>
#include <vector>

#include "hidetell/model.hpp"

namespace hidetell::oracle {

using Mat = std::vector<std::vector<double>>;
using Vec = std::vector<double>;

inline Mat to_mat(const Tensor<double>& t) {
  Mat m(t.rows(), Vec(t.cols()));
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m[i][j] = t.at(i, j);
  return m;
}

inline Vec to_vec(const Tensor<double>& t) { return Vec(t.data().begin(), t.data().end()); }

// W·x for W[out×in].
inline Vec matvec(const Mat& w, const Vec& x) {
  Vec y(w.size(), 0.0);
  for (std::size_t i = 0; i < w.size(); ++i)
    for (std::size_t j = 0; j < x.size(); ++j) y[i] += w[i][j] * x[j];
  return y;
}

inline double sigmoid(double v) { return 1.0 / (1.0 + std::exp(-v)); }

// Embedded-Gaussian non-local block, one slot at a time.
inline Mat nonlocal(const NonLocalBlock<double>& b, const Mat& x) {
  const Mat wt = to_mat(b.theta.weight), wp = to_mat(b.phi.weight), wg = to_mat(b.g.weight),
            wz = to_mat(b.z.weight);
  const std::size_t n = x.size();
  Mat th(n), ph(n), gx(n);
  for (std::size_t i = 0; i < n; ++i) {
    th[i] = matvec(wt, x[i]);
    ph[i] = matvec(wp, x[i]);
    gx[i] = matvec(wg, x[i]);
  }
  Mat out(n);
  for (std::size_t i = 0; i < n; ++i) {
    Vec e(n);
    double mx = -1e300;
    for (std::size_t j = 0; j < n; ++j) {
      double d = 0;
      for (std::size_t k = 0; k < th[i].size(); ++k) d += th[i][k] * ph[j][k];
      e[j] = d;
      mx = std::max(mx, d);
    }
    double z = 0;
    for (double& v : e) z += (v = std::exp(v - mx));
    Vec y(gx[0].size(), 0.0);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t k = 0; k < y.size(); ++k) y[k] += e[j] / z * gx[j][k];
    Vec zy = matvec(wz, y);
    out[i] = x[i];
    for (std::size_t k = 0; k < zy.size(); ++k) out[i][k] += zy[k];
  }
  return out;
}

inline Vec gru(const GRUCell<double>& c, const Vec& h, const Vec& x) {
  auto gate = [&](const Tensor<double>& w, const Tensor<double>& u, const Tensor<double>& b,
                  const Vec& hh) {
    Vec a = matvec(to_mat(w), x), bb = matvec(to_mat(u), hh);
    for (std::size_t i = 0; i < a.size(); ++i) a[i] += bb[i] + b[i];
    return a;
  };
  Vec z = gate(c.w_z, c.u_z, c.b_z, h), r = gate(c.w_r, c.u_r, c.b_r, h);
  for (double& v : z) v = sigmoid(v);
  for (double& v : r) v = sigmoid(v);
  Vec rh(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) rh[i] = r[i] * h[i];
  Vec cand = gate(c.w_h, c.u_h, c.b_h, rh);
  Vec out(h.size());
  for (std::size_t i = 0; i < h.size(); ++i) out[i] = (1 - z[i]) * h[i] + z[i] * std::tanh(cand[i]);
  return out;
}

inline Vec head(const OutputHead<double>& hd, const Vec& h) {
  Vec a = matvec(to_mat(hd.hidden.weight), h);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = std::tanh(a[i] + hd.hidden.bias[i]);
  Vec l = matvec(to_mat(hd.out.weight), a);
  for (std::size_t i = 0; i < l.size(); ++i) l[i] += hd.out.bias[i];
  return l;
}

inline Vec log_softmax(const Vec& l) {
  double mx = -1e300;
  for (double v : l) mx = std::max(mx, v);
  double z = 0;
  for (double v : l) z += std::exp(v - mx);
  Vec out(l.size());
  for (std::size_t i = 0; i < l.size(); ++i) out[i] = l[i] - mx - std::log(z);
  return out;
}

struct Scored {
  std::vector<std::size_t> tokens;
  double log_prob;
};

// Every EOS-terminated sequence of at most max_len tokens, scored with the
// straight-line GRU and head. PAD and BOS are never emitted.
inline std::vector<Scored> enumerate_sequences(const INetModel<double>& m, const Vec& f,
                                               std::size_t max_len) {
  std::vector<Scored> out;
  const std::size_t v = m.config.vocab;
  std::vector<std::size_t> seq;
  std::function<void(const Vec&, double)> rec = [&](const Vec& h, double lp) {
    Vec x = f;
    Vec word(v, 0.0);
    word[seq.empty() ? kBosId : seq.back()] = 1.0;
    x.insert(x.end(), word.begin(), word.end());
    const Vec h2 = gru(m.decoder, h, x);
    const Vec logp = log_softmax(head(m.head, h2));
    for (std::size_t tok = kEosId; tok < v; ++tok) {
      seq.push_back(tok);
      if (tok == kEosId) {
        out.push_back({seq, lp + logp[tok]});
      } else if (seq.size() < max_len) {
        rec(h2, lp + logp[tok]);
      }
      seq.pop_back();
    }
  };
  rec(Vec(m.config.decoder_hidden, 0.0), 0.0);
  return out;
}

// Highest log-probability, ties to the lexicographically smaller sequence.
inline Scored best_sequence(const std::vector<Scored>& all) {
  Scored best = all.front();
  for (const Scored& s : all) {
    if (s.log_prob > best.log_prob || (s.log_prob == best.log_prob && s.tokens < best.tokens)) best = s;
  }
  return best;
}

}  // namespace hidetell::oracle
