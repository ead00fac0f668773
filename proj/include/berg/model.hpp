#pragma once

#include <complex>
#include <cstdint>
#include <map>
#include <vector>

namespace berg {

using cplx = std::complex<double>;

// Parameters of the model space: n - n0 complex horizontal directions z_i
// with weights a[i], and n0 real normal directions w_j with weights
// a_perp[j]. The standard case sets every weight to 2*pi.
struct ModelParams {
  int n = 1;
  int n0 = 1;
  std::vector<double> a;       // size n - n0
  std::vector<double> a_perp;  // size n0
  double drop_threshold = 1e-14;
  int degree_cap = 24;

  int nh() const { return n - n0; }
  bool kahler_standard() const;
  void validate() const;
  bool same_shape(const ModelParams& o) const;
  static ModelParams standard(int n, int n0);
};

// A point of the model space.
struct Point {
  std::vector<cplx> z0;      // horizontal complex coordinates, size n - n0
  std::vector<double> zperp; // normal real coordinates, size n0
  static Point origin(const ModelParams& p);
};

// Variable blocks of a kernel polynomial q(Z, Z'). Unprimed blocks refer to
// Z = (z, conj z, w), primed blocks to Z'.
enum class VarBlock : uint8_t { Z = 0, ZBar = 1, W = 2, ZP = 3, ZBarP = 4, WP = 5 };

struct Var {
  VarBlock block = VarBlock::Z;
  int index = 0;
};

// Polynomial with complex coefficients in the six variable blocks.
// Monomials are exponent vectors laid out as [z | zbar | w | z' | zbar' | w'].
class Poly {
 public:
  using Mono = std::vector<uint8_t>;

  Poly() = default;
  Poly(int nh, int n0);

  static Poly constant(int nh, int n0, cplx c);
  static Poly variable(int nh, int n0, Var v);

  int nh() const { return nh_; }
  int n0() const { return n0_; }
  int mono_len() const { return 4 * nh_ + 2 * n0_; }
  int offset(Var v) const;

  bool is_zero() const { return terms_.empty(); }
  const std::map<Mono, cplx>& terms() const { return terms_; }

  void add_term(const Mono& m, cplx c);
  Poly& operator+=(const Poly& o);
  Poly& operator-=(const Poly& o);
  Poly operator+(const Poly& o) const;
  Poly operator-(const Poly& o) const;
  Poly operator*(const Poly& o) const;
  Poly operator*(cplx s) const;
  Poly operator-() const;

  Poly derivative(Var v) const;
  Poly multiply_var(Var v) const;

  // conj(q(Z', Z)) as a polynomial identity.
  Poly hermitian_swap() const;
  // q(-Z, -Z').
  Poly negate_vars() const;
  // Fold primed exponents onto the matching unprimed blocks (restriction to
  // the diagonal Z' = Z).
  Poly diagonal() const;
  // Keep only terms whose exponents vanish on every listed block.
  Poly restrict_zero(const std::vector<VarBlock>& blocks) const;

  int total_degree() const;
  double max_abs_coeff() const;
  void drop_relative(double rel);
  // max |coeff difference| against o.
  double coeff_distance(const Poly& o) const;

  cplx eval(const Point& Z, const Point& Zp) const;

 private:
  int nh_ = 0, n0_ = 0;
  std::map<Mono, cplx> terms_;
};

// One letter of a ladder word: a coordinate multiplier, a b+ family letter
// (b+_i horizontal, bperp+_j normal), or a b family letter (b_i, bperp_j).
// Canonical order is multipliers, then b+ letters, then b letters; within a
// group horizontal precedes normal and indices ascend.
struct Letter {
  enum class Kind : uint8_t { Mult = 0, BPlus = 1, B = 2 };
  enum class Fam : uint8_t { H = 0, N = 1 };

  Kind kind = Kind::Mult;
  Var var{VarBlock::Z, 0};  // Mult only
  Fam fam = Fam::H;         // BPlus / B only
  int index = 0;            // BPlus / B only

  static Letter mult(Var v);
  static Letter b(int i);
  static Letter b_plus(int i);
  static Letter bperp(int j);
  static Letter bperp_plus(int j);

  std::uint64_t key() const;
  bool operator<(const Letter& o) const { return key() < o.key(); }
  bool operator==(const Letter& o) const { return key() == o.key(); }
};

// Finite complex combination of ladder words. Stored form is always
// canonical: normal_order is applied by every constructor and operation.
class LadderPolynomial {
 public:
  using Word = std::vector<Letter>;

  LadderPolynomial() = default;
  explicit LadderPolynomial(const ModelParams& p) : params_(p) {}

  static LadderPolynomial zero(const ModelParams& p);
  static LadderPolynomial constant(const ModelParams& p, cplx c);
  static LadderPolynomial b(const ModelParams& p, int i);
  static LadderPolynomial b_plus(const ModelParams& p, int i);
  static LadderPolynomial bperp(const ModelParams& p, int j);
  static LadderPolynomial bperp_plus(const ModelParams& p, int j);
  static LadderPolynomial mult(const ModelParams& p, Var v);
  static LadderPolynomial mult(const ModelParams& p, const Poly& q);
  // Sum b_j b+_j + sum bperp_j bperp+_j, the operator whose eigenvalues
  // grade the EigenForm components.
  static LadderPolynomial harmonic_oscillator(const ModelParams& p);

  const ModelParams& params() const { return params_; }
  const std::map<Word, cplx>& terms() const { return terms_; }
  bool is_zero() const { return terms_.empty(); }

  LadderPolynomial operator+(const LadderPolynomial& o) const;
  LadderPolynomial operator-(const LadderPolynomial& o) const;
  LadderPolynomial operator*(const LadderPolynomial& o) const;
  LadderPolynomial operator*(cplx s) const;
  LadderPolynomial operator-() const;

  double max_abs_coeff() const;

 private:
  ModelParams params_;
  std::map<Word, cplx> terms_;

  void accumulate_canonical(const Word& w, cplx c);
  friend LadderPolynomial normal_order(const LadderPolynomial& expr);
  friend class KernelOps;
};

// q(Z,Z') times the model Gaussian kernel P(Z,Z').
struct KernelPolynomial {
  ModelParams params;
  Poly q;

  KernelPolynomial() = default;
  explicit KernelPolynomial(const ModelParams& p);
  KernelPolynomial(const ModelParams& p, const Poly& poly);

  // q = 1: the kernel P itself.
  static KernelPolynomial identity(const ModelParams& p);

  KernelPolynomial operator+(const KernelPolynomial& o) const;
  KernelPolynomial operator-(const KernelPolynomial& o) const;
  KernelPolynomial operator*(cplx s) const;
  KernelPolynomial operator-() const;
  bool is_zero() const { return q.is_zero(); }
};

// Decomposition K = sum over (alpha, gamma) of b^alpha bperp^gamma (f P),
// with f holomorphic in unprimed z and unrestricted in primed variables.
struct EigenKey {
  std::vector<uint8_t> alpha;  // size n - n0
  std::vector<uint8_t> gamma;  // size n0

  bool operator<(const EigenKey& o) const;
  bool is_ground() const;
};

struct EigenForm {
  ModelParams params;
  std::map<EigenKey, Poly> components;

  double eigenvalue(const EigenKey& k) const;
};

struct ResolveMode {
  enum Kind { Project, Resolve } kind = Project;
  int power = 1;

  static ResolveMode project() { return {Project, 0}; }
  static ResolveMode resolve(int m) { return {Resolve, m}; }
};

enum class MomentDomain { DiagonalNormal, FullDiagonalSlice };

LadderPolynomial normal_order(const LadderPolynomial& expr);
KernelPolynomial apply_to_kernel(const LadderPolynomial& op, const KernelPolynomial& k);
EigenForm to_eigen_form(const KernelPolynomial& k);
KernelPolynomial eigen_to_kernel(const EigenForm& e);
KernelPolynomial project_and_resolve(const KernelPolynomial& k, ResolveMode mode);
cplx eval_kernel(const KernelPolynomial& k, const Point& Z, const Point& Zp);
cplx gaussian_moment_integrate(const KernelPolynomial& k, MomentDomain domain);

// Value of the bare Gaussian kernel P(Z, Z').
cplx eval_gaussian(const ModelParams& p, const Point& Z, const Point& Zp);

// Integral kernel composition (k1 k2)(Z,Z') = integral of k1(Z,W) k2(W,Z')
// over W, evaluated exactly through Gaussian moments.
KernelPolynomial compose_kernels(const KernelPolynomial& k1, const KernelPolynomial& k2);

// K*(Z,Z') = conj(K(Z',Z)).
KernelPolynomial hermitian_conjugate(const KernelPolynomial& k);

// K(-Z,-Z').
KernelPolynomial parity_reflect(const KernelPolynomial& k);

}  // namespace berg
