#include "berg/model.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numbers>
#include <stdexcept>

namespace berg {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;

double binom(int n, int k) {
  if (k < 0 || k > n) return 0.0;
  double r = 1.0;
  for (int i = 0; i < k; ++i) r = r * double(n - i) / double(i + 1);
  return r;
}

double falling(int n, int k) {  // n (n-1) ... (n-k+1)
  double r = 1.0;
  for (int i = 0; i < k; ++i) r *= double(n - i);
  return r;
}

double dfact(int n) {  // (n)!! with (-1)!! = 1
  double r = 1.0;
  for (int k = n; k > 1; k -= 2) r *= double(k);
  return r;
}

}  // namespace

// ---------------------------------------------------------------------------
// ModelParams / Point

bool ModelParams::kahler_standard() const {
  auto is2pi = [](double x) { return std::abs(x - kTwoPi) < 1e-12; };
  return std::all_of(a.begin(), a.end(), is2pi) &&
         std::all_of(a_perp.begin(), a_perp.end(), is2pi);
}

void ModelParams::validate() const {
  if (n0 < 0 || n0 > n) throw std::invalid_argument("ModelParams: need 0 <= n0 <= n");
  if ((int)a.size() != n - n0) throw std::invalid_argument("ModelParams: a must have n - n0 entries");
  if ((int)a_perp.size() != n0) throw std::invalid_argument("ModelParams: a_perp must have n0 entries");
  for (double x : a)
    if (!(x > 0)) throw std::invalid_argument("ModelParams: a entries must be positive");
  for (double x : a_perp)
    if (!(x > 0)) throw std::invalid_argument("ModelParams: a_perp entries must be positive");
}

bool ModelParams::same_shape(const ModelParams& o) const {
  return n == o.n && n0 == o.n0 && a == o.a && a_perp == o.a_perp;
}

ModelParams ModelParams::standard(int n, int n0) {
  ModelParams p;
  p.n = n;
  p.n0 = n0;
  p.a.assign(n - n0, kTwoPi);
  p.a_perp.assign(n0, kTwoPi);
  p.validate();
  return p;
}

Point Point::origin(const ModelParams& p) {
  Point pt;
  pt.z0.assign(p.nh(), cplx(0.0, 0.0));
  pt.zperp.assign(p.n0, 0.0);
  return pt;
}

// ---------------------------------------------------------------------------
// Poly

Poly::Poly(int nh, int n0) : nh_(nh), n0_(n0) {}

int Poly::offset(Var v) const {
  bool normal = v.block == VarBlock::W || v.block == VarBlock::WP;
  if (v.index < 0 || v.index >= (normal ? n0_ : nh_))
    throw std::out_of_range("Poly::offset: variable index outside the model");
  switch (v.block) {
    case VarBlock::Z:     return v.index;
    case VarBlock::ZBar:  return nh_ + v.index;
    case VarBlock::W:     return 2 * nh_ + v.index;
    case VarBlock::ZP:    return 2 * nh_ + n0_ + v.index;
    case VarBlock::ZBarP: return 3 * nh_ + n0_ + v.index;
    case VarBlock::WP:    return 4 * nh_ + n0_ + v.index;
  }
  throw std::logic_error("Poly::offset: bad block");
}

Poly Poly::constant(int nh, int n0, cplx c) {
  Poly p(nh, n0);
  if (c != cplx(0.0, 0.0)) p.terms_[Mono(p.mono_len(), 0)] = c;
  return p;
}

Poly Poly::variable(int nh, int n0, Var v) {
  Poly p(nh, n0);
  Mono m(p.mono_len(), 0);
  m[p.offset(v)] = 1;
  p.terms_[m] = cplx(1.0, 0.0);
  return p;
}

void Poly::add_term(const Mono& m, cplx c) {
  if ((int)m.size() != mono_len()) throw std::invalid_argument("Poly::add_term: bad monomial length");
  auto it = terms_.find(m);
  if (it == terms_.end()) {
    if (c != cplx(0.0, 0.0)) terms_[m] = c;
  } else {
    it->second += c;
    if (it->second == cplx(0.0, 0.0)) terms_.erase(it);
  }
}

Poly& Poly::operator+=(const Poly& o) {
  for (const auto& [m, c] : o.terms_) add_term(m, c);
  return *this;
}

Poly& Poly::operator-=(const Poly& o) {
  for (const auto& [m, c] : o.terms_) add_term(m, -c);
  return *this;
}

Poly Poly::operator+(const Poly& o) const {
  Poly r = *this;
  r += o;
  return r;
}

Poly Poly::operator-(const Poly& o) const {
  Poly r = *this;
  r -= o;
  return r;
}

Poly Poly::operator*(const Poly& o) const {
  Poly r(nh_, n0_);
  for (const auto& [m1, c1] : terms_) {
    for (const auto& [m2, c2] : o.terms_) {
      Mono m(mono_len());
      for (int i = 0; i < mono_len(); ++i) {
        int e = int(m1[i]) + int(m2[i]);
        if (e > 255) throw std::runtime_error("Poly: exponent overflow");
        m[i] = uint8_t(e);
      }
      r.add_term(m, c1 * c2);
    }
  }
  return r;
}

Poly Poly::operator*(cplx s) const {
  Poly r(nh_, n0_);
  if (s == cplx(0.0, 0.0)) return r;
  for (const auto& [m, c] : terms_) r.terms_[m] = c * s;
  return r;
}

Poly Poly::operator-() const { return *this * cplx(-1.0, 0.0); }

Poly Poly::derivative(Var v) const {
  Poly r(nh_, n0_);
  int o = offset(v);
  for (const auto& [m, c] : terms_) {
    if (m[o] == 0) continue;
    Mono d = m;
    d[o] -= 1;
    r.add_term(d, c * double(m[o]));
  }
  return r;
}

Poly Poly::multiply_var(Var v) const {
  Poly r(nh_, n0_);
  int o = offset(v);
  for (const auto& [m, c] : terms_) {
    Mono d = m;
    if (d[o] == 255) throw std::runtime_error("Poly: exponent overflow");
    d[o] += 1;
    r.add_term(d, c);
  }
  return r;
}

Poly Poly::hermitian_swap() const {
  Poly r(nh_, n0_);
  for (const auto& [m, c] : terms_) {
    Mono d(mono_len(), 0);
    for (int i = 0; i < nh_; ++i) {
      d[offset({VarBlock::Z, i})] = m[offset({VarBlock::ZBarP, i})];
      d[offset({VarBlock::ZBar, i})] = m[offset({VarBlock::ZP, i})];
      d[offset({VarBlock::ZP, i})] = m[offset({VarBlock::ZBar, i})];
      d[offset({VarBlock::ZBarP, i})] = m[offset({VarBlock::Z, i})];
    }
    for (int j = 0; j < n0_; ++j) {
      d[offset({VarBlock::W, j})] = m[offset({VarBlock::WP, j})];
      d[offset({VarBlock::WP, j})] = m[offset({VarBlock::W, j})];
    }
    r.add_term(d, std::conj(c));
  }
  return r;
}

Poly Poly::negate_vars() const {
  Poly r(nh_, n0_);
  for (const auto& [m, c] : terms_) {
    int deg = 0;
    for (uint8_t e : m) deg += e;
    r.add_term(m, (deg % 2 == 0) ? c : -c);
  }
  return r;
}

Poly Poly::diagonal() const {
  Poly r(nh_, n0_);
  for (const auto& [m, c] : terms_) {
    Mono d(mono_len(), 0);
    for (int i = 0; i < nh_; ++i) {
      d[offset({VarBlock::Z, i})] =
          uint8_t(m[offset({VarBlock::Z, i})] + m[offset({VarBlock::ZP, i})]);
      d[offset({VarBlock::ZBar, i})] =
          uint8_t(m[offset({VarBlock::ZBar, i})] + m[offset({VarBlock::ZBarP, i})]);
    }
    for (int j = 0; j < n0_; ++j) {
      d[offset({VarBlock::W, j})] =
          uint8_t(m[offset({VarBlock::W, j})] + m[offset({VarBlock::WP, j})]);
    }
    r.add_term(d, c);
  }
  return r;
}

Poly Poly::restrict_zero(const std::vector<VarBlock>& blocks) const {
  Poly r(nh_, n0_);
  for (const auto& [m, c] : terms_) {
    bool keep = true;
    for (VarBlock b : blocks) {
      int cnt = (b == VarBlock::W || b == VarBlock::WP) ? n0_ : nh_;
      for (int i = 0; i < cnt && keep; ++i)
        if (m[offset({b, i})] != 0) keep = false;
      if (!keep) break;
    }
    if (keep) r.add_term(m, c);
  }
  return r;
}

int Poly::total_degree() const {
  int deg = 0;
  for (const auto& [m, c] : terms_) {
    (void)c;
    int d = 0;
    for (uint8_t e : m) d += e;
    deg = std::max(deg, d);
  }
  return deg;
}

double Poly::max_abs_coeff() const {
  double mx = 0.0;
  for (const auto& [m, c] : terms_) {
    (void)m;
    mx = std::max(mx, std::abs(c));
  }
  return mx;
}

void Poly::drop_relative(double rel) {
  double mx = max_abs_coeff();
  if (mx == 0.0) {
    terms_.clear();
    return;
  }
  double cut = rel * mx;
  for (auto it = terms_.begin(); it != terms_.end();) {
    if (std::abs(it->second) < cut) it = terms_.erase(it);
    else ++it;
  }
}

double Poly::coeff_distance(const Poly& o) const {
  double d = 0.0;
  for (const auto& [m, c] : terms_) {
    auto it = o.terms_.find(m);
    cplx oc = (it == o.terms_.end()) ? cplx(0.0, 0.0) : it->second;
    d = std::max(d, std::abs(c - oc));
  }
  for (const auto& [m, c] : o.terms_) {
    if (terms_.find(m) == terms_.end()) d = std::max(d, std::abs(c));
  }
  return d;
}

cplx Poly::eval(const Point& Z, const Point& Zp) const {
  if ((int)Z.z0.size() != nh_ || (int)Z.zperp.size() != n0_ ||
      (int)Zp.z0.size() != nh_ || (int)Zp.zperp.size() != n0_)
    throw std::invalid_argument("Poly::eval: point dimension mismatch");
  std::vector<cplx> vals(mono_len());
  for (int i = 0; i < nh_; ++i) {
    vals[offset({VarBlock::Z, i})] = Z.z0[i];
    vals[offset({VarBlock::ZBar, i})] = std::conj(Z.z0[i]);
    vals[offset({VarBlock::ZP, i})] = Zp.z0[i];
    vals[offset({VarBlock::ZBarP, i})] = std::conj(Zp.z0[i]);
  }
  for (int j = 0; j < n0_; ++j) {
    vals[offset({VarBlock::W, j})] = Z.zperp[j];
    vals[offset({VarBlock::WP, j})] = Zp.zperp[j];
  }
  cplx total(0.0, 0.0);
  for (const auto& [m, c] : terms_) {
    cplx t = c;
    for (int i = 0; i < mono_len(); ++i)
      for (int e = 0; e < m[i]; ++e) t *= vals[i];
    total += t;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Letter / LadderPolynomial

Letter Letter::mult(Var v) {
  Letter l;
  l.kind = Kind::Mult;
  l.var = v;
  return l;
}

Letter Letter::b(int i) {
  Letter l;
  l.kind = Kind::B;
  l.fam = Fam::H;
  l.index = i;
  return l;
}

Letter Letter::b_plus(int i) {
  Letter l;
  l.kind = Kind::BPlus;
  l.fam = Fam::H;
  l.index = i;
  return l;
}

Letter Letter::bperp(int j) {
  Letter l;
  l.kind = Kind::B;
  l.fam = Fam::N;
  l.index = j;
  return l;
}

Letter Letter::bperp_plus(int j) {
  Letter l;
  l.kind = Kind::BPlus;
  l.fam = Fam::N;
  l.index = j;
  return l;
}

std::uint64_t Letter::key() const {
  std::uint64_t second =
      (kind == Kind::Mult) ? std::uint64_t(var.block) : std::uint64_t(fam);
  std::uint64_t third = (kind == Kind::Mult) ? std::uint64_t(var.index) : std::uint64_t(index);
  return (std::uint64_t(kind) << 40) | (second << 32) | third;
}

LadderPolynomial LadderPolynomial::zero(const ModelParams& p) { return LadderPolynomial(p); }

LadderPolynomial LadderPolynomial::constant(const ModelParams& p, cplx c) {
  LadderPolynomial l(p);
  if (c != cplx(0.0, 0.0)) l.terms_[Word{}] = c;
  return l;
}

LadderPolynomial LadderPolynomial::b(const ModelParams& p, int i) {
  LadderPolynomial l(p);
  l.terms_[Word{Letter::b(i)}] = 1.0;
  return l;
}

LadderPolynomial LadderPolynomial::b_plus(const ModelParams& p, int i) {
  LadderPolynomial l(p);
  l.terms_[Word{Letter::b_plus(i)}] = 1.0;
  return l;
}

LadderPolynomial LadderPolynomial::bperp(const ModelParams& p, int j) {
  LadderPolynomial l(p);
  l.terms_[Word{Letter::bperp(j)}] = 1.0;
  return l;
}

LadderPolynomial LadderPolynomial::bperp_plus(const ModelParams& p, int j) {
  LadderPolynomial l(p);
  l.terms_[Word{Letter::bperp_plus(j)}] = 1.0;
  return l;
}

LadderPolynomial LadderPolynomial::mult(const ModelParams& p, Var v) {
  LadderPolynomial l(p);
  l.terms_[Word{Letter::mult(v)}] = 1.0;
  return l;
}

LadderPolynomial LadderPolynomial::mult(const ModelParams& p, const Poly& q) {
  LadderPolynomial l(p);
  for (const auto& [m, c] : q.terms()) {
    Word w;
    for (int i = 0; i < q.mono_len(); ++i) {
      // decode block/index from the layout
      Var v;
      int nh = q.nh(), n0 = q.n0();
      if (i < nh) v = {VarBlock::Z, i};
      else if (i < 2 * nh) v = {VarBlock::ZBar, i - nh};
      else if (i < 2 * nh + n0) v = {VarBlock::W, i - 2 * nh};
      else if (i < 3 * nh + n0) v = {VarBlock::ZP, i - 2 * nh - n0};
      else if (i < 4 * nh + n0) v = {VarBlock::ZBarP, i - 3 * nh - n0};
      else v = {VarBlock::WP, i - 4 * nh - n0};
      for (int e = 0; e < m[i]; ++e) w.push_back(Letter::mult(v));
    }
    std::sort(w.begin(), w.end());
    auto it = l.terms_.find(w);
    if (it == l.terms_.end()) l.terms_[w] = c;
    else it->second += c;
  }
  return l;
}

LadderPolynomial LadderPolynomial::harmonic_oscillator(const ModelParams& p) {
  LadderPolynomial sum = zero(p);
  for (int i = 0; i < p.nh(); ++i) sum = sum + b(p, i) * b_plus(p, i);
  for (int j = 0; j < p.n0; ++j) sum = sum + bperp(p, j) * bperp_plus(p, j);
  return sum;
}

namespace {

// Scalar commutator [X, Y] for adjacent letters with X on the left, used
// when X must move right of Y to reach canonical order.
cplx letter_commutator(const Letter& X, const Letter& Y, const ModelParams& p) {
  using K = Letter::Kind;
  using F = Letter::Fam;
  if (X.kind == K::B && Y.kind == K::BPlus) {
    if (X.fam == Y.fam && X.index == Y.index)
      return (X.fam == F::H) ? cplx(-2.0 * p.a[X.index], 0.0)
                             : cplx(-2.0 * p.a_perp[X.index], 0.0);
    return 0.0;
  }
  if (X.kind == K::B && Y.kind == K::Mult) {
    if (X.fam == F::H && Y.var.block == VarBlock::Z && Y.var.index == X.index) return -2.0;
    if (X.fam == F::N && Y.var.block == VarBlock::W && Y.var.index == X.index) return -1.0;
    return 0.0;
  }
  if (X.kind == K::BPlus && Y.kind == K::Mult) {
    if (X.fam == F::H && Y.var.block == VarBlock::ZBar && Y.var.index == X.index) return 2.0;
    if (X.fam == F::N && Y.var.block == VarBlock::W && Y.var.index == X.index) return 1.0;
    return 0.0;
  }
  return 0.0;
}

void reduce_word(const LadderPolynomial::Word& w, cplx c,
                 std::map<LadderPolynomial::Word, cplx>& out, const ModelParams& p) {
  if ((int)w.size() > 2 * p.degree_cap)
    throw std::runtime_error("LadderPolynomial: word length beyond degree cap");
  for (size_t i = 0; i + 1 < w.size(); ++i) {
    if (w[i + 1] < w[i]) {
      LadderPolynomial::Word swapped = w;
      std::swap(swapped[i], swapped[i + 1]);
      reduce_word(swapped, c, out, p);
      cplx comm = letter_commutator(w[i], w[i + 1], p);
      if (comm != cplx(0.0, 0.0)) {
        LadderPolynomial::Word shrunk;
        shrunk.reserve(w.size() - 2);
        for (size_t j = 0; j < w.size(); ++j)
          if (j != i && j != i + 1) shrunk.push_back(w[j]);
        reduce_word(shrunk, c * comm, out, p);
      }
      return;
    }
  }
  auto it = out.find(w);
  if (it == out.end()) out[w] = c;
  else it->second += c;
}

}  // namespace

void LadderPolynomial::accumulate_canonical(const Word& w, cplx c) {
  reduce_word(w, c, terms_, params_);
}

LadderPolynomial normal_order(const LadderPolynomial& expr) {
  LadderPolynomial out(expr.params());
  for (const auto& [w, c] : expr.terms()) out.accumulate_canonical(w, c);
  double mx = out.max_abs_coeff();
  double cut = expr.params().drop_threshold * mx;
  for (auto it = out.terms_.begin(); it != out.terms_.end();) {
    if (std::abs(it->second) == 0.0 || std::abs(it->second) < cut)
      it = out.terms_.erase(it);
    else
      ++it;
  }
  return out;
}

LadderPolynomial LadderPolynomial::operator+(const LadderPolynomial& o) const {
  if (!params_.same_shape(o.params_))
    throw std::invalid_argument("LadderPolynomial: parameter mismatch");
  LadderPolynomial r = *this;
  for (const auto& [w, c] : o.terms_) {
    auto it = r.terms_.find(w);
    if (it == r.terms_.end()) r.terms_[w] = c;
    else {
      it->second += c;
      if (it->second == cplx(0.0, 0.0)) r.terms_.erase(it);
    }
  }
  return r;
}

LadderPolynomial LadderPolynomial::operator-(const LadderPolynomial& o) const {
  return *this + (o * cplx(-1.0, 0.0));
}

LadderPolynomial LadderPolynomial::operator*(const LadderPolynomial& o) const {
  if (!params_.same_shape(o.params_))
    throw std::invalid_argument("LadderPolynomial: parameter mismatch");
  LadderPolynomial raw(params_);
  for (const auto& [w1, c1] : terms_) {
    for (const auto& [w2, c2] : o.terms_) {
      Word w = w1;
      w.insert(w.end(), w2.begin(), w2.end());
      raw.accumulate_canonical(w, c1 * c2);
    }
  }
  return normal_order(raw);
}

LadderPolynomial LadderPolynomial::operator*(cplx s) const {
  LadderPolynomial r(params_);
  if (s == cplx(0.0, 0.0)) return r;
  for (const auto& [w, c] : terms_) r.terms_[w] = c * s;
  return r;
}

LadderPolynomial LadderPolynomial::operator-() const { return *this * cplx(-1.0, 0.0); }

double LadderPolynomial::max_abs_coeff() const {
  double mx = 0.0;
  for (const auto& [w, c] : terms_) {
    (void)w;
    mx = std::max(mx, std::abs(c));
  }
  return mx;
}

// ---------------------------------------------------------------------------
// KernelPolynomial

KernelPolynomial::KernelPolynomial(const ModelParams& p)
    : params(p), q(p.nh(), p.n0) {}

KernelPolynomial::KernelPolynomial(const ModelParams& p, const Poly& poly)
    : params(p), q(poly) {
  if (poly.nh() != p.nh() || poly.n0() != p.n0)
    throw std::invalid_argument("KernelPolynomial: polynomial shape mismatch");
}

KernelPolynomial KernelPolynomial::identity(const ModelParams& p) {
  return KernelPolynomial(p, Poly::constant(p.nh(), p.n0, 1.0));
}

KernelPolynomial KernelPolynomial::operator+(const KernelPolynomial& o) const {
  if (!params.same_shape(o.params))
    throw std::invalid_argument("KernelPolynomial: parameter mismatch");
  return KernelPolynomial(params, q + o.q);
}

KernelPolynomial KernelPolynomial::operator-(const KernelPolynomial& o) const {
  if (!params.same_shape(o.params))
    throw std::invalid_argument("KernelPolynomial: parameter mismatch");
  return KernelPolynomial(params, q - o.q);
}

KernelPolynomial KernelPolynomial::operator*(cplx s) const {
  return KernelPolynomial(params, q * s);
}

KernelPolynomial KernelPolynomial::operator-() const { return *this * cplx(-1.0, 0.0); }

// ---------------------------------------------------------------------------
// apply_to_kernel

namespace {

Poly apply_word_to_poly(const ModelParams& p, const LadderPolynomial::Word& w, Poly q) {
  using K = Letter::Kind;
  using F = Letter::Fam;
  for (auto it = w.rbegin(); it != w.rend(); ++it) {
    const Letter& l = *it;
    if (l.kind == K::Mult) {
      q = q.multiply_var(l.var);
    } else if (l.kind == K::BPlus) {
      if (l.fam == F::H)
        q = q.derivative({VarBlock::ZBar, l.index}) * cplx(2.0, 0.0);
      else
        q = q.derivative({VarBlock::W, l.index});
    } else {
      if (l.fam == F::H) {
        Poly t = q.derivative({VarBlock::Z, l.index}) * cplx(-2.0, 0.0);
        Poly zb = Poly::variable(q.nh(), q.n0(), {VarBlock::ZBar, l.index});
        Poly zbp = Poly::variable(q.nh(), q.n0(), {VarBlock::ZBarP, l.index});
        t += (zb - zbp) * q * cplx(p.a[l.index], 0.0);
        q = t;
      } else {
        Poly t = q.derivative({VarBlock::W, l.index}) * cplx(-1.0, 0.0);
        Poly wv = Poly::variable(q.nh(), q.n0(), {VarBlock::W, l.index});
        t += wv * q * cplx(2.0 * p.a_perp[l.index], 0.0);
        q = t;
      }
    }
  }
  return q;
}

}  // namespace

KernelPolynomial apply_to_kernel(const LadderPolynomial& op, const KernelPolynomial& k) {
  if (!op.params().same_shape(k.params))
    throw std::invalid_argument("apply_to_kernel: parameter mismatch");
  Poly res(k.params.nh(), k.params.n0);
  for (const auto& [w, c] : op.terms()) {
    res += apply_word_to_poly(k.params, w, k.q) * c;
  }
  if (res.total_degree() > k.params.degree_cap)
    throw std::runtime_error("apply_to_kernel: degree cap exceeded");
  return KernelPolynomial(k.params, res);
}

// ---------------------------------------------------------------------------
// to_eigen_form and friends

bool EigenKey::operator<(const EigenKey& o) const {
  if (alpha != o.alpha) return alpha < o.alpha;
  return gamma < o.gamma;
}

bool EigenKey::is_ground() const {
  auto zero = [](uint8_t e) { return e == 0; };
  return std::all_of(alpha.begin(), alpha.end(), zero) &&
         std::all_of(gamma.begin(), gamma.end(), zero);
}

double EigenForm::eigenvalue(const EigenKey& k) const {
  double ev = 0.0;
  for (int i = 0; i < params.nh(); ++i) ev += 2.0 * k.alpha[i] * params.a[i];
  for (int j = 0; j < params.n0; ++j) ev += 2.0 * k.gamma[j] * params.a_perp[j];
  return ev;
}

namespace {

// Coefficients c_t with w^m P = sum_t c_t bperp^t P in one normal dimension.
std::vector<double> normal_power_rep(int m, double alpha) {
  std::vector<double> cur{1.0};
  for (int s = 1; s <= m; ++s) {
    std::vector<double> nxt(cur.size() + 1, 0.0);
    for (int t = 0; t < (int)cur.size(); ++t) {
      if (cur[t] == 0.0) continue;
      nxt[t + 1] += cur[t] / (2.0 * alpha);
      if (t >= 1) nxt[t - 1] += double(t) * cur[t];
    }
    cur = std::move(nxt);
  }
  return cur;
}

struct EigenAccum {
  const ModelParams* p;
  EigenForm* out;

  void add(const EigenKey& key, const Poly::Mono& fmono, cplx c) {
    auto it = out->components.find(key);
    if (it == out->components.end()) {
      Poly f(p->nh(), p->n0);
      f.add_term(fmono, c);
      out->components.emplace(key, std::move(f));
    } else {
      it->second.add_term(fmono, c);
    }
  }
};

}  // namespace

EigenForm to_eigen_form(const KernelPolynomial& k) {
  const ModelParams& p = k.params;
  const int nh = p.nh(), n0 = p.n0;
  EigenForm e;
  e.params = p;
  EigenAccum acc{&p, &e};

  Poly probe(nh, n0);
  for (const auto& [mono, coeff] : k.q.terms()) {
    // exponents of the unprimed blocks
    std::vector<int> az(nh), bz(nh), gw(n0);
    for (int i = 0; i < nh; ++i) {
      az[i] = mono[probe.offset({VarBlock::Z, i})];
      bz[i] = mono[probe.offset({VarBlock::ZBar, i})];
    }
    for (int j = 0; j < n0; ++j) gw[j] = mono[probe.offset({VarBlock::W, j})];

    // per-dimension expansion tables
    std::vector<std::vector<double>> nrep(n0);
    for (int j = 0; j < n0; ++j) nrep[j] = normal_power_rep(gw[j], p.a_perp[j]);

    // enumerate: beta_i (zbar split), t_j (normal level), s_i (z commute-in)
    std::vector<int> beta(nh), tj(n0), si(nh);
    std::function<void(int, cplx)> loop_s = [&](int i, cplx c) {
      if (i == nh) {
        EigenKey key;
        key.alpha.resize(nh);
        key.gamma.resize(n0);
        for (int d = 0; d < nh; ++d) key.alpha[d] = uint8_t(beta[d] - si[d]);
        for (int d = 0; d < n0; ++d) key.gamma[d] = uint8_t(tj[d]);
        Poly::Mono fm = mono;
        for (int d = 0; d < nh; ++d) {
          fm[probe.offset({VarBlock::Z, d})] = uint8_t(az[d] - si[d]);
          fm[probe.offset({VarBlock::ZBar, d})] = 0;
          fm[probe.offset({VarBlock::ZBarP, d})] =
              uint8_t(fm[probe.offset({VarBlock::ZBarP, d})] + bz[d] - beta[d]);
        }
        for (int d = 0; d < n0; ++d) fm[probe.offset({VarBlock::W, d})] = 0;
        acc.add(key, fm, c);
        return;
      }
      for (si[i] = 0; si[i] <= std::min(az[i], beta[i]); ++si[i]) {
        double f = binom(az[i], si[i]) * binom(beta[i], si[i]) * falling(si[i], si[i]) *
                   std::pow(2.0, si[i]);
        loop_s(i + 1, c * f);
      }
    };
    std::function<void(int, cplx)> loop_t = [&](int j, cplx c) {
      if (j == n0) {
        loop_s(0, c);
        return;
      }
      for (tj[j] = 0; tj[j] < (int)nrep[j].size(); ++tj[j]) {
        if (nrep[j][tj[j]] == 0.0) continue;
        loop_t(j + 1, c * nrep[j][tj[j]]);
      }
    };
    std::function<void(int, cplx)> loop_beta = [&](int i, cplx c) {
      if (i == nh) {
        loop_t(0, c);
        return;
      }
      for (beta[i] = 0; beta[i] <= bz[i]; ++beta[i]) {
        double f = binom(bz[i], beta[i]) / std::pow(p.a[i], beta[i]);
        loop_beta(i + 1, c * f);
      }
    };
    loop_beta(0, coeff);
  }

  // remove numerically empty components
  for (auto it = e.components.begin(); it != e.components.end();) {
    Poly& f = it->second;
    f.drop_relative(p.drop_threshold);
    if (f.is_zero()) it = e.components.erase(it);
    else ++it;
  }
  return e;
}

KernelPolynomial eigen_to_kernel(const EigenForm& e) {
  const ModelParams& p = e.params;
  KernelPolynomial total(p);
  for (const auto& [key, f] : e.components) {
    LadderPolynomial::Word w;
    for (int i = 0; i < p.nh(); ++i)
      for (int r = 0; r < key.alpha[i]; ++r) w.push_back(Letter::b(i));
    for (int j = 0; j < p.n0; ++j)
      for (int r = 0; r < key.gamma[j]; ++r) w.push_back(Letter::bperp(j));
    Poly res = apply_word_to_poly(p, w, f);
    total.q += res;
  }
  return total;
}

KernelPolynomial project_and_resolve(const KernelPolynomial& k, ResolveMode mode) {
  const ModelParams& p = k.params;
  EigenForm e = to_eigen_form(k);
  if (mode.kind == ResolveMode::Project) {
    EigenKey ground;
    ground.alpha.assign(p.nh(), 0);
    ground.gamma.assign(p.n0, 0);
    auto it = e.components.find(ground);
    if (it == e.components.end()) return KernelPolynomial(p);
    return KernelPolynomial(p, it->second);
  }
  if (mode.power < 1) throw std::invalid_argument("project_and_resolve: resolve power must be >= 1");
  KernelPolynomial total(p);
  for (const auto& [key, f] : e.components) {
    if (key.is_ground()) continue;
    double ev = e.eigenvalue(key);
    LadderPolynomial::Word w;
    for (int i = 0; i < p.nh(); ++i)
      for (int r = 0; r < key.alpha[i]; ++r) w.push_back(Letter::b(i));
    for (int j = 0; j < p.n0; ++j)
      for (int r = 0; r < key.gamma[j]; ++r) w.push_back(Letter::bperp(j));
    Poly res = apply_word_to_poly(p, w, f);
    total.q += res * cplx(std::pow(ev, -mode.power), 0.0);
  }
  return total;
}

// ---------------------------------------------------------------------------
// Evaluation and Gaussian moments

cplx eval_gaussian(const ModelParams& p, const Point& Z, const Point& Zp) {
  if ((int)Z.z0.size() != p.nh() || (int)Zp.z0.size() != p.nh() ||
      (int)Z.zperp.size() != p.n0 || (int)Zp.zperp.size() != p.n0)
    throw std::invalid_argument("eval_gaussian: point dimension mismatch");
  cplx expo(0.0, 0.0);
  double pref = 1.0;
  for (int i = 0; i < p.nh(); ++i) {
    pref *= p.a[i] / kTwoPi;
    cplx z = Z.z0[i], zp = Zp.z0[i];
    expo += -0.25 * p.a[i] *
            (std::norm(z) + std::norm(zp) - 2.0 * z * std::conj(zp));
  }
  for (int j = 0; j < p.n0; ++j) {
    pref *= std::sqrt(p.a_perp[j] / std::numbers::pi);
    double w = Z.zperp[j], wp = Zp.zperp[j];
    expo += -0.5 * p.a_perp[j] * (w * w + wp * wp);
  }
  return pref * std::exp(expo);
}

cplx eval_kernel(const KernelPolynomial& k, const Point& Z, const Point& Zp) {
  return k.q.eval(Z, Zp) * eval_gaussian(k.params, Z, Zp);
}

cplx gaussian_moment_integrate(const KernelPolynomial& k, MomentDomain domain) {
  const ModelParams& p = k.params;
  if (domain == MomentDomain::FullDiagonalSlice && p.nh() > 0)
    throw std::invalid_argument(
        "gaussian_moment_integrate: full diagonal slice requires a fully normal model "
        "(the horizontal diagonal of the Gaussian factor does not decay)");
  Poly probe(p.nh(), p.n0);
  double pref = 1.0;
  for (int i = 0; i < p.nh(); ++i) pref *= p.a[i] / kTwoPi;
  cplx total(0.0, 0.0);
  for (const auto& [mono, c] : k.q.terms()) {
    bool horiz = false;
    for (int i = 0; i < p.nh() && !horiz; ++i) {
      if (mono[probe.offset({VarBlock::Z, i})] || mono[probe.offset({VarBlock::ZBar, i})] ||
          mono[probe.offset({VarBlock::ZP, i})] || mono[probe.offset({VarBlock::ZBarP, i})])
        horiz = true;
    }
    if (horiz) continue;  // vanishes at the horizontal origin
    double factor = 1.0;
    bool odd = false;
    for (int j = 0; j < p.n0 && !odd; ++j) {
      int m = mono[probe.offset({VarBlock::W, j})] + mono[probe.offset({VarBlock::WP, j})];
      if (m % 2 == 1) odd = true;
      else factor *= dfact(m - 1) / std::pow(2.0 * p.a_perp[j], m / 2);
    }
    if (odd) continue;
    total += c * factor;
  }
  return total * pref;
}

// ---------------------------------------------------------------------------
// Composition and symmetries

KernelPolynomial compose_kernels(const KernelPolynomial& k1, const KernelPolynomial& k2) {
  if (!k1.params.same_shape(k2.params))
    throw std::invalid_argument("compose_kernels: parameter mismatch");
  const ModelParams& p = k1.params;
  const int nh = p.nh(), n0 = p.n0;
  Poly res(nh, n0);
  Poly probe(nh, n0);

  for (const auto& [m1, c1] : k1.q.terms()) {
    for (const auto& [m2, c2] : k2.q.terms()) {
      // normal moments over the middle variable
      double nf = 1.0;
      bool odd = false;
      for (int j = 0; j < n0 && !odd; ++j) {
        int m = m1[probe.offset({VarBlock::WP, j})] + m2[probe.offset({VarBlock::W, j})];
        if (m % 2 == 1) odd = true;
        else nf *= dfact(m - 1) / std::pow(2.0 * p.a_perp[j], m / 2);
      }
      if (odd) continue;

      Poly::Mono base(probe.mono_len(), 0);
      for (int i = 0; i < nh; ++i) {
        base[probe.offset({VarBlock::Z, i})] = m1[probe.offset({VarBlock::Z, i})];
        base[probe.offset({VarBlock::ZBar, i})] = m1[probe.offset({VarBlock::ZBar, i})];
        base[probe.offset({VarBlock::ZP, i})] = m2[probe.offset({VarBlock::ZP, i})];
        base[probe.offset({VarBlock::ZBarP, i})] = m2[probe.offset({VarBlock::ZBarP, i})];
      }
      for (int j = 0; j < n0; ++j) {
        base[probe.offset({VarBlock::W, j})] = m1[probe.offset({VarBlock::W, j})];
        base[probe.offset({VarBlock::WP, j})] = m2[probe.offset({VarBlock::WP, j})];
      }

      // horizontal moments: per dimension i the middle-variable powers are
      // u^mi ubar^ki; each contraction order t trades a factor (2/a_i) for
      // one power of z_i and one of zbar'_i.
      std::vector<int> mi(nh), ki(nh);
      for (int i = 0; i < nh; ++i) {
        mi[i] = m1[probe.offset({VarBlock::ZP, i})] + m2[probe.offset({VarBlock::Z, i})];
        ki[i] = m1[probe.offset({VarBlock::ZBarP, i})] + m2[probe.offset({VarBlock::ZBar, i})];
      }
      std::function<void(int, double, Poly::Mono&)> loop = [&](int i, double f, Poly::Mono& mono) {
        if (i == nh) {
          res.add_term(mono, c1 * c2 * nf * f);
          return;
        }
        for (int t = 0; t <= std::min(mi[i], ki[i]); ++t) {
          double ft = binom(mi[i], t) * binom(ki[i], t) * falling(t, t) *
                      std::pow(2.0 / p.a[i], t);
          Poly::Mono next = mono;
          int zo = probe.offset({VarBlock::Z, i});
          int zbo = probe.offset({VarBlock::ZBarP, i});
          int ze = int(next[zo]) + mi[i] - t;
          int zbe = int(next[zbo]) + ki[i] - t;
          if (ze > 255 || zbe > 255) throw std::runtime_error("compose_kernels: exponent overflow");
          next[zo] = uint8_t(ze);
          next[zbo] = uint8_t(zbe);
          loop(i + 1, f * ft, next);
        }
      };
      Poly::Mono work = base;
      loop(0, 1.0, work);
    }
  }
  if (res.total_degree() > p.degree_cap)
    throw std::runtime_error("compose_kernels: degree cap exceeded");
  return KernelPolynomial(p, res);
}

KernelPolynomial hermitian_conjugate(const KernelPolynomial& k) {
  return KernelPolynomial(k.params, k.q.hermitian_swap());
}

KernelPolynomial parity_reflect(const KernelPolynomial& k) {
  return KernelPolynomial(k.params, k.q.negate_vars());
}

}  // namespace berg
