#include "lateline/mapping.hpp"

#include <cmath>
#include <cstring>

#include "lateline/errors.hpp"
#include "lateline/io.hpp"

namespace lateline {

namespace {

constexpr std::uint64_t kMappingInitSalt = 0x6d617070696e6701ULL;
constexpr char kCheckpointMagic[4] = {'L', 'L', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

Matrix affine_apply(const Affine& a, const Matrix& x) {
    Matrix y = matmul(x, a.W);
    if (a.b.rows() != 1 || a.b.cols() != y.cols()) {
        throw ShapeError("affine bias shape " + std::to_string(a.b.rows()) + "x" +
                         std::to_string(a.b.cols()) + " does not match output cols " +
                         std::to_string(y.cols()));
    }
    for (int r = 0; r < y.rows(); ++r) {
        double* row = y.row(r);
        const double* b = a.b.row(0);
        for (int c = 0; c < y.cols(); ++c) row[c] += b[c];
    }
    return y;
}

Matrix colsum(const Matrix& m) {
    Matrix s(1, m.cols());
    for (int r = 0; r < m.rows(); ++r) {
        const double* row = m.row(r);
        for (int c = 0; c < m.cols(); ++c) s.at(0, c) += row[c];
    }
    return s;
}

Matrix gelu_matrix(const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    const double* src = x.data();
    double* dst = y.data();
    for (std::size_t i = 0; i < x.size(); ++i) dst[i] = gelu(src[i]);
    return y;
}

// upstream through the activation: d_pre = d_act (.) gelu'(pre)
Matrix gelu_backward(const Matrix& pre, const Matrix& d_act) {
    Matrix d_pre(pre.rows(), pre.cols());
    const double* p = pre.data();
    const double* u = d_act.data();
    double* dst = d_pre.data();
    for (std::size_t i = 0; i < pre.size(); ++i) dst[i] = u[i] * gelu_prime(p[i]);
    return d_pre;
}

Matrix layer_norm_forward(const Matrix& x, const Matrix& scale, const Matrix& shift,
                          LayerNormTape* tape) {
    const int d = x.cols();
    Matrix y(x.rows(), d);
    Matrix xhat(x.rows(), d);
    std::vector<double> inv_std(static_cast<std::size_t>(x.rows()));
    for (int r = 0; r < x.rows(); ++r) {
        const double* row = x.row(r);
        double mu = 0.0;
        for (int c = 0; c < d; ++c) mu += row[c];
        mu /= d;
        double var = 0.0;
        for (int c = 0; c < d; ++c) {
            const double t = row[c] - mu;
            var += t * t;
        }
        var /= d;
        const double is = 1.0 / std::sqrt(var + kLayerNormEps);
        inv_std[static_cast<std::size_t>(r)] = is;
        for (int c = 0; c < d; ++c) {
            const double h = (row[c] - mu) * is;
            xhat.at(r, c) = h;
            y.at(r, c) = h * scale.at(0, c) + shift.at(0, c);
        }
    }
    if (tape) {
        tape->xhat = std::move(xhat);
        tape->inv_std = std::move(inv_std);
    }
    return y;
}

Matrix layer_norm_backward(const LayerNormTape& tape, const Matrix& scale, const Matrix& dy,
                           Matrix& dscale, Matrix& dshift) {
    const int d = dy.cols();
    Matrix dx(dy.rows(), d);
    for (int r = 0; r < dy.rows(); ++r) {
        double m1 = 0.0, m2 = 0.0;
        for (int c = 0; c < d; ++c) {
            const double g = dy.at(r, c);
            const double h = tape.xhat.at(r, c);
            dscale.at(0, c) += g * h;
            dshift.at(0, c) += g;
            const double dh = g * scale.at(0, c);
            m1 += dh;
            m2 += dh * h;
        }
        m1 /= d;
        m2 /= d;
        const double is = tape.inv_std[static_cast<std::size_t>(r)];
        for (int c = 0; c < d; ++c) {
            const double dh = dy.at(r, c) * scale.at(0, c);
            dx.at(r, c) = is * (dh - m1 - tape.xhat.at(r, c) * m2);
        }
    }
    return dx;
}

// Backward through row L2 normalization; rows the forward left at zero get
// zero gradient.
Matrix l2_normalize_backward(const Matrix& pre, const Matrix& dy, double eps = 1e-12) {
    Matrix dx(pre.rows(), pre.cols());
    const int d = pre.cols();
    for (int r = 0; r < pre.rows(); ++r) {
        const double* x = pre.row(r);
        const double* g = dy.row(r);
        const double n = std::sqrt(dot(x, x, d));
        if (n < eps) continue;
        double yg = 0.0;
        for (int c = 0; c < d; ++c) yg += (x[c] / n) * g[c];
        double* out = dx.row(r);
        for (int c = 0; c < d; ++c) out[c] = (g[c] - (x[c] / n) * yg) / n;
    }
    return dx;
}

Matrix softmax_backward(const Matrix& a, const Matrix& da) {
    Matrix ds(a.rows(), a.cols());
    for (int r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (int c = 0; c < a.cols(); ++c) s += a.at(r, c) * da.at(r, c);
        for (int c = 0; c < a.cols(); ++c) ds.at(r, c) = a.at(r, c) * (da.at(r, c) - s);
    }
    return ds;
}

Matrix reshape_copy(const Matrix& m, int rows, int cols) {
    if (m.size() != static_cast<std::size_t>(rows) * static_cast<std::size_t>(cols)) {
        throw ShapeError("reshape: cannot view " + std::to_string(m.rows()) + "x" +
                         std::to_string(m.cols()) + " as " + std::to_string(rows) + "x" +
                         std::to_string(cols));
    }
    Matrix out(rows, cols);
    std::memcpy(out.data(), m.data(), m.size() * sizeof(double));
    return out;
}

Matrix rows_slice(const Matrix& m, int begin, int count) {
    Matrix out(count, m.cols());
    std::memcpy(out.data(), m.row(begin),
                static_cast<std::size_t>(count) * m.cols() * sizeof(double));
    return out;
}

}  // namespace

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

double gelu_prime(double x) {
    static const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::acos(-1.0));
    return 0.5 * (1.0 + std::erf(x / std::sqrt(2.0))) + x * std::exp(-0.5 * x * x) * inv_sqrt_2pi;
}

MappingDims dims_of(const MappingParams& p) {
    MappingDims d;
    d.d_V = p.fv.W.rows();
    d.d_L = p.fv.W.cols();
    d.d_h = p.tr_out.W.cols();
    d.n_vt = d.d_h > 0 ? p.mlp.W2.cols() / d.d_h : 0;
    d.n_tr = static_cast<int>(p.tr_layers.size());
    return d;
}

MappingParams init_mapping(const MappingDims& dims, Rng& rng) {
    if (dims.d_V < 1 || dims.d_L < 1 || dims.d_h < 1 || dims.n_vt < 1 || dims.n_tr < 1) {
        throw ConfigError("init_mapping: all dimensions must be >= 1");
    }
    if ((dims.n_vt * dims.d_h) % 2 != 0) {
        throw ConfigError("init_mapping: n_vt*d_h must be even, got " +
                          std::to_string(dims.n_vt * dims.d_h));
    }
    const int mid = dims.n_vt * dims.d_h / 2;
    MappingParams p;
    p.mlp.W1 = Matrix::gaussian(dims.d_V, mid, rng, 1.0 / std::sqrt(dims.d_V));
    p.mlp.b1 = Matrix(1, mid);
    p.mlp.W2 = Matrix::gaussian(mid, dims.n_vt * dims.d_h, rng, 1.0 / std::sqrt(mid));
    p.mlp.b2 = Matrix(1, dims.n_vt * dims.d_h);
    p.tr_layers.resize(static_cast<std::size_t>(dims.n_tr));
    const double s_l = 1.0 / std::sqrt(dims.d_L);
    for (auto& layer : p.tr_layers) {
        layer.ln1_scale = Matrix(1, dims.d_L, 1.0);
        layer.ln1_shift = Matrix(1, dims.d_L);
        layer.Wq = Matrix::gaussian(dims.d_L, dims.d_L, rng, s_l);
        layer.Wk = Matrix::gaussian(dims.d_L, dims.d_L, rng, s_l);
        layer.Wv = Matrix::gaussian(dims.d_L, dims.d_L, rng, s_l);
        layer.Wo = Matrix::gaussian(dims.d_L, dims.d_L, rng, s_l);
        layer.ln2_scale = Matrix(1, dims.d_L, 1.0);
        layer.ln2_shift = Matrix(1, dims.d_L);
        layer.Wff1 = Matrix::gaussian(dims.d_L, 4 * dims.d_L, rng, s_l);
        layer.Wff2 = Matrix::gaussian(4 * dims.d_L, dims.d_L, rng, 1.0 / std::sqrt(4.0 * dims.d_L));
    }
    p.fv.W = Matrix::gaussian(dims.d_V, dims.d_L, rng, 1.0 / std::sqrt(dims.d_V));
    p.fv.b = Matrix(1, dims.d_L);
    p.tr_out.W = Matrix::gaussian(dims.d_L, dims.d_h, rng, s_l);
    p.tr_out.b = Matrix(1, dims.d_h);
    p.fl.W = Matrix::gaussian(dims.d_L, dims.d_h, rng, s_l);
    p.fl.b = Matrix(1, dims.d_h);
    return p;
}

ParamGradients zero_gradients(const MappingParams& p) {
    ParamGradients g;
    g.mlp.W1 = Matrix(p.mlp.W1.rows(), p.mlp.W1.cols());
    g.mlp.b1 = Matrix(p.mlp.b1.rows(), p.mlp.b1.cols());
    g.mlp.W2 = Matrix(p.mlp.W2.rows(), p.mlp.W2.cols());
    g.mlp.b2 = Matrix(p.mlp.b2.rows(), p.mlp.b2.cols());
    g.tr_layers.resize(p.tr_layers.size());
    for (std::size_t i = 0; i < p.tr_layers.size(); ++i) {
        const auto& l = p.tr_layers[i];
        auto& o = g.tr_layers[i];
        o.ln1_scale = Matrix(1, l.ln1_scale.cols());
        o.ln1_shift = Matrix(1, l.ln1_shift.cols());
        o.Wq = Matrix(l.Wq.rows(), l.Wq.cols());
        o.Wk = Matrix(l.Wk.rows(), l.Wk.cols());
        o.Wv = Matrix(l.Wv.rows(), l.Wv.cols());
        o.Wo = Matrix(l.Wo.rows(), l.Wo.cols());
        o.ln2_scale = Matrix(1, l.ln2_scale.cols());
        o.ln2_shift = Matrix(1, l.ln2_shift.cols());
        o.Wff1 = Matrix(l.Wff1.rows(), l.Wff1.cols());
        o.Wff2 = Matrix(l.Wff2.rows(), l.Wff2.cols());
    }
    g.fv.W = Matrix(p.fv.W.rows(), p.fv.W.cols());
    g.fv.b = Matrix(p.fv.b.rows(), p.fv.b.cols());
    g.tr_out.W = Matrix(p.tr_out.W.rows(), p.tr_out.W.cols());
    g.tr_out.b = Matrix(p.tr_out.b.rows(), p.tr_out.b.cols());
    g.fl.W = Matrix(p.fl.W.rows(), p.fl.W.cols());
    g.fl.b = Matrix(p.fl.b.rows(), p.fl.b.cols());
    return g;
}

Matrix mlp_head_forward(const MlpHeadParams& p, const Matrix& cls, int n_vt, MlpTape* tape) {
    if (cls.rows() != 1 || cls.cols() != p.W1.rows()) {
        throw ShapeError("mlp_head_forward: cls is " + std::to_string(cls.rows()) + "x" +
                         std::to_string(cls.cols()) + ", expected 1x" +
                         std::to_string(p.W1.rows()));
    }
    if (n_vt < 1 || p.W2.cols() % n_vt != 0) {
        throw ShapeError("mlp_head_forward: cannot split " + std::to_string(p.W2.cols()) +
                         " outputs into " + std::to_string(n_vt) + " rows");
    }
    Matrix h1 = matmul(cls, p.W1);
    for (int c = 0; c < h1.cols(); ++c) h1.at(0, c) += p.b1.at(0, c);
    Matrix g1 = gelu_matrix(h1);
    Matrix h2 = matmul(g1, p.W2);
    for (int c = 0; c < h2.cols(); ++c) h2.at(0, c) += p.b2.at(0, c);
    if (tape) {
        tape->cls = cls;
        tape->h1 = h1;
        tape->g1 = g1;
    }
    return reshape_copy(h2, n_vt, p.W2.cols() / n_vt);
}

Matrix cross_attn_forward(const MappingParams& p, const Matrix& patches, const Matrix& text,
                          CrossAttnTape* tape) {
    const MappingDims dims = dims_of(p);
    if (patches.cols() != dims.d_V) {
        throw ShapeError("cross_attn_forward: patches have " + std::to_string(patches.cols()) +
                         " cols, expected d_V=" + std::to_string(dims.d_V));
    }
    if (text.cols() != dims.d_L) {
        throw ShapeError("cross_attn_forward: text has " + std::to_string(text.cols()) +
                         " cols, expected d_L=" + std::to_string(dims.d_L));
    }
    if (text.rows() < 1) {
        throw InputError("cross_attn_forward: need at least one text token as key");
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(dims.d_L));
    Matrix x = affine_apply(p.fv, patches);
    if (tape) {
        tape->patches = patches;
        tape->text = text;
        tape->x0 = x;
        tape->layers.clear();
        tape->layers.reserve(p.tr_layers.size());
    }
    for (const auto& layer : p.tr_layers) {
        AttnLayerTape lt;
        LayerNormTape* ln1 = tape ? &lt.ln1 : nullptr;
        Matrix xn = layer_norm_forward(x, layer.ln1_scale, layer.ln1_shift, ln1);
        Matrix q = matmul(xn, layer.Wq);
        Matrix k = matmul(text, layer.Wk);
        Matrix v = matmul(text, layer.Wv);
        Matrix s = matmul_nt(q, k);
        scale_inplace(s, scale);
        Matrix a = softmax_rows(s);
        Matrix av = matmul(a, v);
        Matrix o = matmul(av, layer.Wo);
        Matrix x_mid = x;
        add_inplace(x_mid, o);
        LayerNormTape* ln2 = tape ? &lt.ln2 : nullptr;
        Matrix xn2 = layer_norm_forward(x_mid, layer.ln2_scale, layer.ln2_shift, ln2);
        Matrix f1 = matmul(xn2, layer.Wff1);
        Matrix g = gelu_matrix(f1);
        Matrix f2 = matmul(g, layer.Wff2);
        Matrix x_out = x_mid;
        add_inplace(x_out, f2);
        if (tape) {
            lt.x_in = std::move(x);
            lt.xn = std::move(xn);
            lt.q = std::move(q);
            lt.k = std::move(k);
            lt.v = std::move(v);
            lt.attn = std::move(a);
            lt.av = std::move(av);
            lt.x_mid = std::move(x_mid);
            lt.xn2 = std::move(xn2);
            lt.ff_pre = std::move(f1);
            lt.ff_act = std::move(g);
            tape->layers.push_back(std::move(lt));
        }
        x = std::move(x_out);
    }
    if (tape) tape->x_final = x;
    return affine_apply(p.tr_out, x);
}

TokenMatrix assemble_query(const MappingParams& p, const TextFeatures& txt,
                           const ImageFeatures& img, bool stage1_text_mask, QueryTape* tape) {
    const MappingDims dims = dims_of(p);
    if (txt.embeddings.cols() != dims.d_L) {
        throw ShapeError("assemble_query: text features have " +
                         std::to_string(txt.embeddings.cols()) + " cols, expected d_L=" +
                         std::to_string(dims.d_L));
    }
    if (img.cls.rows() != 1 || img.cls.cols() != dims.d_V) {
        throw ShapeError("assemble_query: cls is " + std::to_string(img.cls.rows()) + "x" +
                         std::to_string(img.cls.cols()) + ", expected 1x" +
                         std::to_string(dims.d_V));
    }
    const int n_q = txt.n_tokens();
    const int n_v = img.n_patches();

    Matrix fl_pre = affine_apply(p.fl, txt.embeddings);
    Matrix q_text = l2_normalize_rows(fl_pre);

    MlpTape* mt = tape ? &tape->mlp : nullptr;
    Matrix mlp_pre = mlp_head_forward(p.mlp, img.cls, dims.n_vt, mt);
    Matrix q_mlp = l2_normalize_rows(mlp_pre);

    CrossAttnTape* ct = tape ? &tape->tr : nullptr;
    Matrix tr_pre = cross_attn_forward(p, img.patches, txt.embeddings, ct);
    Matrix q_tr = l2_normalize_rows(tr_pre);

    TokenMatrix out;
    out.embeddings = Matrix(n_q + dims.n_vt + n_v, dims.d_h);
    out.active.assign(static_cast<std::size_t>(n_q + dims.n_vt + n_v), 1);
    for (int r = 0; r < n_q; ++r) {
        std::memcpy(out.embeddings.row(r), q_text.row(r),
                    static_cast<std::size_t>(dims.d_h) * sizeof(double));
        const bool masked = stage1_text_mask || r < txt.instruction_len;
        out.active[static_cast<std::size_t>(r)] = masked ? 0 : 1;
    }
    for (int r = 0; r < dims.n_vt; ++r) {
        std::memcpy(out.embeddings.row(n_q + r), q_mlp.row(r),
                    static_cast<std::size_t>(dims.d_h) * sizeof(double));
    }
    for (int r = 0; r < n_v; ++r) {
        std::memcpy(out.embeddings.row(n_q + dims.n_vt + r), q_tr.row(r),
                    static_cast<std::size_t>(dims.d_h) * sizeof(double));
    }
    if (tape) {
        tape->text_raw = txt.embeddings;
        tape->fl_pre = std::move(fl_pre);
        tape->mlp_pre = std::move(mlp_pre);
        tape->tr_pre = std::move(tr_pre);
    }
    return out;
}

TokenMatrix project_document(const Affine& fl, const TextFeatures& doc_txt, DocTape* tape) {
    if (doc_txt.embeddings.cols() != fl.W.rows()) {
        throw ShapeError("project_document: doc features have " +
                         std::to_string(doc_txt.embeddings.cols()) + " cols, expected " +
                         std::to_string(fl.W.rows()));
    }
    Matrix pre = affine_apply(fl, doc_txt.embeddings);
    TokenMatrix out = TokenMatrix::all_active(l2_normalize_rows(pre));
    if (tape) {
        tape->text_raw = doc_txt.embeddings;
        tape->pre = std::move(pre);
    }
    return out;
}

TokenMatrix project_document(const MappingParams& p, const TextFeatures& doc_txt, DocTape* tape) {
    return project_document(p.fl, doc_txt, tape);
}

QueryBackward assemble_backward(const MappingParams& p, const QueryTape& tape,
                                const Matrix& upstream) {
    const MappingDims dims = dims_of(p);
    const int n_q = tape.text_raw.rows();
    const int n_v = tape.tr.patches.rows();
    if (upstream.rows() != n_q + dims.n_vt + n_v || upstream.cols() != dims.d_h) {
        throw ShapeError("assemble_backward: upstream is " + std::to_string(upstream.rows()) +
                         "x" + std::to_string(upstream.cols()) + ", expected " +
                         std::to_string(n_q + dims.n_vt + n_v) + "x" + std::to_string(dims.d_h));
    }
    QueryBackward out;
    out.grads = zero_gradients(p);
    out.dtext = Matrix(n_q, dims.d_L);
    out.dcls = Matrix(1, dims.d_V);
    out.dpatches = Matrix(n_v, dims.d_V);

    // text rows through fl
    Matrix up_text = rows_slice(upstream, 0, n_q);
    Matrix d_fl_pre = l2_normalize_backward(tape.fl_pre, up_text);
    out.grads.fl.W = matmul_tn(tape.text_raw, d_fl_pre);
    out.grads.fl.b = colsum(d_fl_pre);
    out.dtext = matmul_nt(d_fl_pre, p.fl.W);

    // MLP head rows
    Matrix up_mlp = rows_slice(upstream, n_q, dims.n_vt);
    Matrix d_mlp_pre = l2_normalize_backward(tape.mlp_pre, up_mlp);
    Matrix dh2 = reshape_copy(d_mlp_pre, 1, dims.n_vt * dims.d_h);
    Matrix dg1 = matmul_nt(dh2, p.mlp.W2);
    out.grads.mlp.W2 = matmul_tn(tape.mlp.g1, dh2);
    out.grads.mlp.b2 = dh2;
    Matrix dh1 = gelu_backward(tape.mlp.h1, dg1);
    out.grads.mlp.W1 = matmul_tn(tape.mlp.cls, dh1);
    out.grads.mlp.b1 = dh1;
    out.dcls = matmul_nt(dh1, p.mlp.W1);

    // transformer head rows
    Matrix up_tr = rows_slice(upstream, n_q + dims.n_vt, n_v);
    Matrix d_tr_pre = l2_normalize_backward(tape.tr_pre, up_tr);
    out.grads.tr_out.W = matmul_tn(tape.tr.x_final, d_tr_pre);
    out.grads.tr_out.b = colsum(d_tr_pre);
    Matrix dx = matmul_nt(d_tr_pre, p.tr_out.W);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dims.d_L));
    for (int li = static_cast<int>(p.tr_layers.size()) - 1; li >= 0; --li) {
        const auto& layer = p.tr_layers[static_cast<std::size_t>(li)];
        const auto& lt = tape.tr.layers[static_cast<std::size_t>(li)];
        auto& g = out.grads.tr_layers[static_cast<std::size_t>(li)];

        // feed-forward block: x_out = x_mid + gelu(ln2(x_mid) Wff1) Wff2
        Matrix dx_mid = dx;
        Matrix dg_act = matmul_nt(dx, layer.Wff2);
        add_inplace(g.Wff2, matmul_tn(lt.ff_act, dx));
        Matrix df1 = gelu_backward(lt.ff_pre, dg_act);
        add_inplace(g.Wff1, matmul_tn(lt.xn2, df1));
        Matrix dxn2 = matmul_nt(df1, layer.Wff1);
        add_inplace(dx_mid, layer_norm_backward(lt.ln2, layer.ln2_scale, dxn2, g.ln2_scale,
                                                g.ln2_shift));

        // attention block: x_mid = x_in + (attn v) Wo
        Matrix dx_in = dx_mid;
        Matrix dav = matmul_nt(dx_mid, layer.Wo);
        add_inplace(g.Wo, matmul_tn(lt.av, dx_mid));
        Matrix da = matmul_nt(dav, lt.v);
        Matrix dv = matmul_tn(lt.attn, dav);
        Matrix ds = softmax_backward(lt.attn, da);
        Matrix dq = matmul(ds, lt.k);
        scale_inplace(dq, scale);
        Matrix dk = matmul_tn(ds, lt.q);
        scale_inplace(dk, scale);
        add_inplace(g.Wq, matmul_tn(lt.xn, dq));
        Matrix dxn = matmul_nt(dq, layer.Wq);
        add_inplace(g.Wk, matmul_tn(tape.tr.text, dk));
        add_inplace(out.dtext, matmul_nt(dk, layer.Wk));
        add_inplace(g.Wv, matmul_tn(tape.tr.text, dv));
        add_inplace(out.dtext, matmul_nt(dv, layer.Wv));
        add_inplace(dx_in, layer_norm_backward(lt.ln1, layer.ln1_scale, dxn, g.ln1_scale,
                                               g.ln1_shift));
        dx = std::move(dx_in);
    }

    out.grads.fv.W = matmul_tn(tape.tr.patches, dx);
    out.grads.fv.b = colsum(dx);
    out.dpatches = matmul_nt(dx, p.fv.W);
    return out;
}

DocBackward project_backward(const Affine& fl, const DocTape& tape, const Matrix& upstream) {
    if (!upstream.same_shape(tape.pre)) {
        throw ShapeError("project_backward: upstream is " + std::to_string(upstream.rows()) +
                         "x" + std::to_string(upstream.cols()) + ", expected " +
                         std::to_string(tape.pre.rows()) + "x" + std::to_string(tape.pre.cols()));
    }
    DocBackward out;
    Matrix d_pre = l2_normalize_backward(tape.pre, upstream);
    out.grad_fl.W = matmul_tn(tape.text_raw, d_pre);
    out.grad_fl.b = colsum(d_pre);
    out.dtext = matmul_nt(d_pre, fl.W);
    return out;
}

Model init_model(const MappingDims& dims, const EncoderConfig& enc) {
    if (enc.d_text != dims.d_L) {
        throw ConfigError("init_model: encoder d_text " + std::to_string(enc.d_text) +
                          " must equal d_L " + std::to_string(dims.d_L));
    }
    if (enc.d_vision != dims.d_V) {
        throw ConfigError("init_model: encoder d_vision " + std::to_string(enc.d_vision) +
                          " must equal d_V " + std::to_string(dims.d_V));
    }
    Model m;
    m.dims = dims;
    m.enc = enc;
    Rng rng(mix_seed(enc.seed, kMappingInitSalt));
    m.map = init_mapping(dims, rng);
    m.fl_doc = m.map.fl;
    m.enc_table_q = make_text_table(enc);
    m.enc_table_d = m.enc_table_q;
    return m;
}

namespace {

void write_tensor(BinaryWriter& out, const std::string& name, const Matrix& m) {
    out.str(name);
    out.u32(static_cast<std::uint32_t>(m.rows()));
    out.u32(static_cast<std::uint32_t>(m.cols()));
    const double* d = m.data();
    for (std::size_t i = 0; i < m.size(); ++i) out.f64(d[i]);
}

Matrix read_tensor(BinaryReader& in, const std::string& path, const std::string& want) {
    const std::string name = in.str();
    if (name != want) {
        throw FormatError(path + ": expected tensor '" + want + "', found '" + name + "'");
    }
    const std::uint32_t rows = in.u32();
    const std::uint32_t cols = in.u32();
    if (rows == 0 || cols == 0 || rows > (1u << 24) || cols > (1u << 24)) {
        throw FormatError(path + ": tensor '" + want + "' has bad shape " +
                          std::to_string(rows) + "x" + std::to_string(cols));
    }
    Matrix m(static_cast<int>(rows), static_cast<int>(cols));
    double* d = m.data();
    for (std::size_t i = 0; i < m.size(); ++i) d[i] = in.f64();
    return m;
}

template <typename ModelT>
auto tensor_list(ModelT& m) {
    std::vector<std::pair<std::string, decltype(&m.map.mlp.W1)>> t;
    t.emplace_back("mlp.W1", &m.map.mlp.W1);
    t.emplace_back("mlp.b1", &m.map.mlp.b1);
    t.emplace_back("mlp.W2", &m.map.mlp.W2);
    t.emplace_back("mlp.b2", &m.map.mlp.b2);
    for (std::size_t i = 0; i < m.map.tr_layers.size(); ++i) {
        auto& l = m.map.tr_layers[i];
        const std::string pre = "tr" + std::to_string(i) + ".";
        t.emplace_back(pre + "ln1_scale", &l.ln1_scale);
        t.emplace_back(pre + "ln1_shift", &l.ln1_shift);
        t.emplace_back(pre + "Wq", &l.Wq);
        t.emplace_back(pre + "Wk", &l.Wk);
        t.emplace_back(pre + "Wv", &l.Wv);
        t.emplace_back(pre + "Wo", &l.Wo);
        t.emplace_back(pre + "ln2_scale", &l.ln2_scale);
        t.emplace_back(pre + "ln2_shift", &l.ln2_shift);
        t.emplace_back(pre + "Wff1", &l.Wff1);
        t.emplace_back(pre + "Wff2", &l.Wff2);
    }
    t.emplace_back("fv.W", &m.map.fv.W);
    t.emplace_back("fv.b", &m.map.fv.b);
    t.emplace_back("tr_out.W", &m.map.tr_out.W);
    t.emplace_back("tr_out.b", &m.map.tr_out.b);
    t.emplace_back("fl.W", &m.map.fl.W);
    t.emplace_back("fl.b", &m.map.fl.b);
    t.emplace_back("fl_doc.W", &m.fl_doc.W);
    t.emplace_back("fl_doc.b", &m.fl_doc.b);
    t.emplace_back("enc_table_q", &m.enc_table_q);
    t.emplace_back("enc_table_d", &m.enc_table_d);
    return t;
}

}  // namespace

void save_checkpoint(const std::string& path, const Model& m) {
    BinaryWriter out(path);
    out.bytes(kCheckpointMagic, 4);
    out.u32(kCheckpointVersion);
    out.u32(static_cast<std::uint32_t>(m.dims.d_L));
    out.u32(static_cast<std::uint32_t>(m.dims.d_V));
    out.u32(static_cast<std::uint32_t>(m.dims.d_h));
    out.u32(static_cast<std::uint32_t>(m.dims.n_vt));
    out.u32(static_cast<std::uint32_t>(m.dims.n_tr));
    out.u32(static_cast<std::uint32_t>(m.enc.d_text));
    out.u32(static_cast<std::uint32_t>(m.enc.d_vision));
    out.u32(static_cast<std::uint32_t>(m.enc.vocab_size));
    out.u32(static_cast<std::uint32_t>(m.enc.max_tokens));
    out.u64(m.enc.seed);
    const auto tensors = tensor_list(m);
    out.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, mat] : tensors) write_tensor(out, name, *mat);
    out.close();
}

Model load_checkpoint(const std::string& path) {
    BinaryReader in(path);
    char magic[4];
    in.bytes(magic, 4);
    if (std::memcmp(magic, kCheckpointMagic, 4) != 0) {
        throw FormatError(path + ": bad checkpoint magic at byte 0");
    }
    const std::uint32_t version = in.u32();
    if (version != kCheckpointVersion) {
        throw FormatError(path + ": unsupported checkpoint version " + std::to_string(version));
    }
    Model m;
    m.dims.d_L = static_cast<int>(in.u32());
    m.dims.d_V = static_cast<int>(in.u32());
    m.dims.d_h = static_cast<int>(in.u32());
    m.dims.n_vt = static_cast<int>(in.u32());
    m.dims.n_tr = static_cast<int>(in.u32());
    m.enc.d_text = static_cast<int>(in.u32());
    m.enc.d_vision = static_cast<int>(in.u32());
    m.enc.vocab_size = static_cast<int>(in.u32());
    m.enc.max_tokens = static_cast<int>(in.u32());
    m.enc.seed = in.u64();
    if (m.dims.d_L < 1 || m.dims.d_V < 1 || m.dims.d_h < 1 || m.dims.n_vt < 1 ||
        m.dims.n_tr < 1 || m.enc.vocab_size < 1) {
        throw FormatError(path + ": bad dimension block");
    }
    m.map.tr_layers.resize(static_cast<std::size_t>(m.dims.n_tr));
    const std::uint32_t count = in.u32();
    auto tensors = tensor_list(m);
    if (count != tensors.size()) {
        throw FormatError(path + ": tensor count " + std::to_string(count) + ", expected " +
                          std::to_string(tensors.size()));
    }
    for (auto& [name, mat] : tensors) *mat = read_tensor(in, path, name);
    in.expect_eof();
    // shape sanity against the dimension block
    const MappingDims d = dims_of(m.map);
    if (d.d_L != m.dims.d_L || d.d_V != m.dims.d_V || d.d_h != m.dims.d_h ||
        d.n_vt != m.dims.n_vt || d.n_tr != m.dims.n_tr) {
        throw FormatError(path + ": tensor shapes disagree with the dimension block");
    }
    return m;
}

}  // namespace lateline
