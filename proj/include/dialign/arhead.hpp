#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "dialign/backends.hpp"
#include "dialign/corpus.hpp"
#include "dialign/errors.hpp"

// Addressee-recognition head: two one-hidden-layer MLPs project per-turn
// vectors into sender and addressee spaces, and a biaffine form scores every
// (turn, earlier turn) pair. Turn indices in the public API are 1-based.
namespace dialign::ar {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

/// affine(d -> h), rectifier, affine(h -> p)
template <typename Scalar>
struct Mlp {
    Matrix<Scalar> w1;  // h x d
    Vector<Scalar> b1;  // h
    Matrix<Scalar> w2;  // p x h
    Vector<Scalar> b2;  // p

    static Mlp zeros(int d, int h, int p) {
        return {Matrix<Scalar>::Zero(h, d), Vector<Scalar>::Zero(h), Matrix<Scalar>::Zero(p, h),
                Vector<Scalar>::Zero(p)};
    }
};

template <typename Scalar>
struct ARModel {
    Mlp<Scalar> sender;
    Mlp<Scalar> addressee;
    Matrix<Scalar> biaffine;  // (p + 1) x p

    int input_dim() const { return static_cast<int>(sender.w1.cols()); }
    int hidden_dim() const { return static_cast<int>(sender.w1.rows()); }
    int proj_dim() const { return static_cast<int>(sender.w2.rows()); }

    static ARModel zeros(int d, int h, int p) {
        return {Mlp<Scalar>::zeros(d, h, p), Mlp<Scalar>::zeros(d, h, p),
                Matrix<Scalar>::Zero(p + 1, p)};
    }

    /// Visits every parameter block in a fixed order (the serialization order).
    template <typename F>
    void for_each_param(F&& f) {
        f("sender.w1", sender.w1);
        f("sender.b1", sender.b1);
        f("sender.w2", sender.w2);
        f("sender.b2", sender.b2);
        f("addressee.w1", addressee.w1);
        f("addressee.b1", addressee.b1);
        f("addressee.w2", addressee.w2);
        f("addressee.b2", addressee.b2);
        f("biaffine", biaffine);
    }
    template <typename F>
    void for_each_param(F&& f) const {
        const_cast<ARModel*>(this)->for_each_param(
            [&](const char* name, auto& block) { f(name, std::as_const(block)); });
    }

    bool shapes_consistent() const {
        const auto d = sender.w1.cols(), h = sender.w1.rows(), p = sender.w2.rows();
        auto mlp_ok = [&](const Mlp<Scalar>& m) {
            return m.w1.rows() == h && m.w1.cols() == d && m.b1.size() == h &&
                   m.w2.rows() == p && m.w2.cols() == h && m.b2.size() == p;
        };
        return d > 0 && h > 0 && p > 0 && mlp_ok(sender) && mlp_ok(addressee) &&
               biaffine.rows() == p + 1 && biaffine.cols() == p;
    }

    bool all_finite() const {
        bool ok = true;
        for_each_param([&](const char*, const auto& block) { ok = ok && block.allFinite(); });
        return ok;
    }

    /// this -= rate * grad, block by block.
    void descend(Scalar rate, const ARModel& grad) {
        auto mlp_step = [rate](Mlp<Scalar>& m, const Mlp<Scalar>& g) {
            m.w1 -= rate * g.w1;
            m.b1 -= rate * g.b1;
            m.w2 -= rate * g.w2;
            m.b2 -= rate * g.b2;
        };
        mlp_step(sender, grad.sender);
        mlp_step(addressee, grad.addressee);
        biaffine -= rate * grad.biaffine;
    }

    Vector<Scalar> flatten() const {
        std::vector<Scalar> values;
        for_each_param([&](const char*, const auto& block) {
            for (Eigen::Index r = 0; r < block.rows(); ++r)
                for (Eigen::Index c = 0; c < block.cols(); ++c) values.push_back(block(r, c));
        });
        return Eigen::Map<Vector<Scalar>>(values.data(), static_cast<Eigen::Index>(values.size()));
    }

    void unflatten(const Vector<Scalar>& values) {
        Eigen::Index k = 0;
        for_each_param([&](const char*, auto& block) {
            for (Eigen::Index r = 0; r < block.rows(); ++r)
                for (Eigen::Index c = 0; c < block.cols(); ++c) block(r, c) = values(k++);
        });
    }
};

using ARModeld = ARModel<double>;

template <typename Scalar>
struct MlpActivations {
    Matrix<Scalar> pre;     // t x h, before the rectifier
    Matrix<Scalar> hidden;  // t x h
    Matrix<Scalar> out;     // t x p
};

template <typename Scalar>
MlpActivations<Scalar> mlp_forward(const Mlp<Scalar>& mlp, const Matrix<Scalar>& x) {
    MlpActivations<Scalar> a;
    a.pre = (x * mlp.w1.transpose()).rowwise() + mlp.b1.transpose();
    a.hidden = a.pre.cwiseMax(Scalar(0));
    a.out = (a.hidden * mlp.w2.transpose()).rowwise() + mlp.b2.transpose();
    return a;
}

template <typename Scalar>
Matrix<Scalar> with_bias_column(const Matrix<Scalar>& v) {
    Matrix<Scalar> out(v.rows(), v.cols() + 1);
    out << v, Matrix<Scalar>::Ones(v.rows(), 1);
    return out;
}

template <typename Scalar>
void check_inputs(const Matrix<Scalar>& turn_vectors, const ARModel<Scalar>& model) {
    if (!model.shapes_consistent()) throw DataError("arhead: inconsistent model shapes");
    if (turn_vectors.rows() < 1) throw DataError("arhead: at least one turn vector is required");
    if (turn_vectors.cols() != model.input_dim()) {
        throw DataError("arhead: turn vector dimension " + std::to_string(turn_vectors.cols()) +
                        " does not match model input dimension " +
                        std::to_string(model.input_dim()));
    }
    if (!turn_vectors.allFinite()) throw DataError("arhead: non-finite turn vector");
}

/// t x t matrix whose (i, j) entry, for j < i (0-based), is the score of turn
/// j as the addressee of turn i. Entries with j >= i are -infinity.
template <typename Scalar>
Matrix<Scalar> score_matrix(const Matrix<Scalar>& turn_vectors, const ARModel<Scalar>& model) {
    check_inputs(turn_vectors, model);
    const auto vs = mlp_forward(model.sender, turn_vectors).out;
    const auto va = mlp_forward(model.addressee, turn_vectors).out;
    Matrix<Scalar> scores = with_bias_column(vs) * model.biaffine * va.transpose();
    const Eigen::Index t = scores.rows();
    for (Eigen::Index i = 0; i < t; ++i)
        for (Eigen::Index j = i; j < t; ++j) scores(i, j) = -std::numeric_limits<Scalar>::infinity();
    return scores;
}

/// Softmax over candidates 1..i-1 of row i (1-based).
template <typename Scalar>
Vector<Scalar> addressee_probs(const Matrix<Scalar>& scores, int i) {
    if (i < 2) throw DataError("addressee_probs: turn index must be >= 2");
    if (i > scores.rows()) throw DataError("addressee_probs: turn index out of range");
    Vector<Scalar> row = scores.row(i - 1).head(i - 1).transpose();
    const Scalar top = row.maxCoeff();
    Vector<Scalar> e = (row.array() - top).exp().matrix();
    return e / e.sum();
}

/// Highest-scoring candidate for row i (1-based); ties go to the smallest index.
template <typename Scalar>
int predict_addressee(const Matrix<Scalar>& scores, int i) {
    if (i < 2 || i > scores.rows()) throw DataError("predict_addressee: turn index out of range");
    int best = 1;
    for (int j = 2; j < i; ++j) {
        if (scores(i - 1, j - 1) > scores(i - 1, best - 1)) best = j;
    }
    return best;
}

/// Turn vectors plus the gold reply-to of every turn (entry 0 unused).
template <typename Scalar>
struct LabeledContext {
    Matrix<Scalar> turns;
    std::vector<int> reply_to;
};

template <typename Scalar>
struct LossGrad {
    Scalar loss = 0;
    ARModel<Scalar> grad;
    std::size_t scored_turns = 0;
};

/// Mean cross-entropy of the gold addressee over every turn i >= 2 in the
/// batch, with its exact gradient.
template <typename Scalar>
LossGrad<Scalar> loss_and_grad(std::span<const LabeledContext<Scalar>> batch,
                               const ARModel<Scalar>& model) {
    const int d = model.input_dim(), h = model.hidden_dim(), p = model.proj_dim();
    LossGrad<Scalar> out{Scalar(0), ARModel<Scalar>::zeros(d, h, p), 0};
    for (const auto& example : batch) {
        const int t = static_cast<int>(example.turns.rows());
        if (t < 2) throw DataError("loss_and_grad: every context needs at least two turns");
        if (static_cast<int>(example.reply_to.size()) != t) {
            throw DataError("loss_and_grad: one reply_to entry per turn is required");
        }
        for (int i = 2; i <= t; ++i) {
            const int g = example.reply_to[static_cast<std::size_t>(i - 1)];
            if (g < 1 || g >= i) {
                throw DataError("loss_and_grad: gold reply_to " + std::to_string(g) +
                                " out of range for turn " + std::to_string(i));
            }
        }
        out.scored_turns += static_cast<std::size_t>(t - 1);
    }
    if (out.scored_turns == 0) return out;
    const Scalar inv_n = Scalar(1) / static_cast<Scalar>(out.scored_turns);

    auto backprop_mlp = [](const Mlp<Scalar>& mlp, const MlpActivations<Scalar>& act,
                           const Matrix<Scalar>& x, const Matrix<Scalar>& d_out, Mlp<Scalar>& g) {
        g.w2.noalias() += d_out.transpose() * act.hidden;
        g.b2 += d_out.colwise().sum().transpose();
        Matrix<Scalar> d_hidden = d_out * mlp.w2;
        Matrix<Scalar> d_pre =
            d_hidden.cwiseProduct((act.pre.array() > Scalar(0)).template cast<Scalar>().matrix());
        g.w1.noalias() += d_pre.transpose() * x;
        g.b1 += d_pre.colwise().sum().transpose();
    };

    for (const auto& example : batch) {
        check_inputs(example.turns, model);
        const Matrix<Scalar>& x = example.turns;
        const int t = static_cast<int>(x.rows());
        const auto as = mlp_forward(model.sender, x);
        const auto aa = mlp_forward(model.addressee, x);
        const Matrix<Scalar> vs1 = with_bias_column(as.out);
        const Matrix<Scalar> left = vs1 * model.biaffine;  // t x p
        const Matrix<Scalar> scores = left * aa.out.transpose();

        Matrix<Scalar> d_scores = Matrix<Scalar>::Zero(t, t);
        for (int i = 2; i <= t; ++i) {
            const int g = example.reply_to[static_cast<std::size_t>(i - 1)];
            const auto row = scores.row(i - 1).head(i - 1);
            const Scalar top = row.maxCoeff();
            const auto e = (row.array() - top).exp();
            const Scalar z = e.sum();
            out.loss += (top + std::log(z) - scores(i - 1, g - 1)) * inv_n;
            d_scores.row(i - 1).head(i - 1) = (e / z).matrix() * inv_n;
            d_scores(i - 1, g - 1) -= inv_n;
        }

        out.grad.biaffine.noalias() += vs1.transpose() * d_scores * aa.out;
        const Matrix<Scalar> d_vs1 = d_scores * aa.out * model.biaffine.transpose();
        const Matrix<Scalar> d_va = d_scores.transpose() * left;
        backprop_mlp(model.sender, as, x, d_vs1.leftCols(p), out.grad.sender);
        backprop_mlp(model.addressee, aa, x, d_va, out.grad.addressee);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Training, evaluation, and coherence (double precision).

struct ARTrainConfig {
    int epochs = 10;
    int batch_size = 128;
    double learning_rate = 0.1;
    std::uint64_t seed = 0;
    int hidden = 256;
    int projection = 128;

    void check() const;
};

struct TrainResult {
    ARModeld model;
    std::vector<double> epoch_losses;  // training-set loss after each epoch
};

enum class CoherenceProxy { Probability, Accuracy };

const char* to_string(CoherenceProxy proxy);
CoherenceProxy parse_proxy(std::string_view name);

/// Uniform(-0.05, 0.05) initialization from a seeded engine.
ARModeld init_model(int d, int h, int p, std::uint64_t seed);

/// Embeds a context and pairs it with its reply links.
LabeledContext<double> label(const DialogueContext& context, Embedder& embedder);

TrainResult train(std::span<const LabeledContext<double>> examples, const ARTrainConfig& config);
TrainResult train(const Dataset& dataset, Embedder& embedder, const ARTrainConfig& config);

double accuracy(const ARModeld& model, std::span<const LabeledContext<double>> examples);
double accuracy(const ARModeld& model, const Dataset& dataset, Embedder& embedder);

/// Coherence of one scored context: mean gold-addressee probability (or 0/1
/// correctness) over turns 2..t. A single-turn context has no links to
/// mis-identify and scores 1.
double coherence_from_scores(const Matrix<double>& scores, std::span<const int> reply_to,
                             CoherenceProxy proxy);
double coherence(const DialogueContext& context, const ARModeld& model, Embedder& embedder,
                 CoherenceProxy proxy = CoherenceProxy::Probability);

/// Appends each response as turn t+1 (speaker and reply link taken from the
/// target slot) and checks the predicted addressee of that turn.
double response_addressee_accuracy(
    std::span<const std::pair<DialogueContext, std::string>> contexts_with_responses,
    const ARModeld& model, Embedder& embedder);

nlohmann::json to_json(const ARModeld& model);
ARModeld model_from_json(const nlohmann::json& json);
void save_model(const ARModeld& model, const std::filesystem::path& path);
ARModeld load_model(const std::filesystem::path& path);

}  // namespace dialign::ar
