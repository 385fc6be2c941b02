# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled game iterations for all-tabular learners.

Mirrors the generic per-step code operation by operation so both backends
agree up to floating-point summation order.
"""

from libc.math cimport exp, log, sqrt, pow
import numpy as np

cdef struct Net:
    double* p
    double* m
    double* v
    double lr
    double b1
    double b2
    double eps
    long step
    int n


cdef inline void adam(Net* net, double* grad, double lr) noexcept nogil:
    cdef int i
    cdef double c1, c2
    net.step += 1
    c1 = 1.0 - pow(net.b1, <double>net.step)
    c2 = 1.0 - pow(net.b2, <double>net.step)
    for i in range(net.n):
        net.m[i] = net.m[i] * net.b1 + (1.0 - net.b1) * grad[i]
        net.v[i] = net.v[i] * net.b2 + ((1.0 - net.b2) * grad[i]) * grad[i]
        net.p[i] -= lr * (net.m[i] / c1) / (sqrt(net.v[i] / c2) + net.eps)


cdef inline double clipv(double x, double lo, double hi, int bounded) noexcept nogil:
    if not bounded:
        return x
    if x < lo:
        return lo
    if x > hi:
        return hi
    return x


cdef inline double clip_mask(double x, double lo, double hi, int bounded) noexcept nogil:
    if not bounded:
        return 1.0
    return 1.0 if (x >= lo and x <= hi) else 0.0


cdef inline double sig(double z) noexcept nogil:
    return 1.0 / (1.0 + exp(-z))


cdef inline void softmax_row(double* logits, double* out, int A) noexcept nogil:
    cdef int a
    cdef double mx = logits[0], tot = 0.0
    for a in range(1, A):
        if logits[a] > mx:
            mx = logits[a]
    for a in range(A):
        out[a] = exp(logits[a] - mx)
    for a in range(A):
        tot += out[a]
    for a in range(A):
        out[a] = out[a] / tot


cdef inline double entropy_of(double* p, int A) noexcept nogil:
    cdef int a
    cdef double h = 0.0
    for a in range(A):
        if p[a] > 0:
            h += p[a] * log(p[a])
    return -h


cdef struct Ctx:
    int S
    int A
    int B
    int relative
    int actor_on_data
    int reward_source  # 0 learned, 1 fixed, 2 observed
    int v_bounded
    double v_lo
    double v_hi
    double r_lo
    double r_hi
    double gamma
    double alpha
    double beta
    double w
    double tau
    double eta_fast
    double eta_temp
    double ent_target
    double* term
    double* d0
    long* a_s
    long* a_a
    long* a_sp
    double* a_r
    long* r_s
    double* r_r
    long* r_sp
    int n_r


cdef inline double reward_at(Ctx* c, double* g, double* a_r, long s, long sp, long rec) noexcept nogil:
    if c.reward_source == 2:
        return a_r[rec]
    return c.r_lo + (c.r_hi - c.r_lo) / (1.0 + exp(-g[s * c.S + sp]))


cdef inline double reward_slope(Ctx* c, double* g, long s, long sp) noexcept nogil:
    cdef double sg = sig(g[s * c.S + sp])
    return ((c.r_hi - c.r_lo) * sg) * (1.0 - sg)


cdef void td_grads(Ctx* c, long* idx, double* pi_probs_sp, double* f, double* fb1, double* fb2, int residual,
                   double* g, double* grad_f_s, double* grad_f_sp, double* grad_g, int want_g,
                   double* value) noexcept nogil:
    """Residual TD (fb1 == f) or double-target TD; gradients accumulated in batch order."""
    cdef int b, a, A = c.A, B = c.B
    cdef long rec, s, sp, act
    cdef double q, qn, boot, scale, rew, delta, acc = 0.0, coef, m1, m2
    for b in range(B):
        rec = idx[b]
        s = c.a_s[rec]
        act = c.a_a[rec]
        sp = c.a_sp[rec]
        boot = 0.0
        for a in range(A):
            if residual:
                qn = clipv(f[sp * A + a], c.v_lo, c.v_hi, c.v_bounded)
            else:
                m1 = clipv(fb1[sp * A + a], c.v_lo, c.v_hi, c.v_bounded)
                m2 = clipv(fb2[sp * A + a], c.v_lo, c.v_hi, c.v_bounded)
                qn = m1 if m1 < m2 else m2
            boot += pi_probs_sp[b * A + a] * qn
        scale = c.gamma * (1.0 - c.term[sp])
        rew = reward_at(c, g, c.a_r, s, sp, rec)
        q = clipv(f[s * A + act], c.v_lo, c.v_hi, c.v_bounded)
        delta = (q - rew) - scale * boot
        acc += delta * delta
        grad_f_s[s * A + act] += (2.0 * delta / B) * clip_mask(f[s * A + act], c.v_lo, c.v_hi, c.v_bounded)
        if residual:
            coef = -2.0 * delta * scale / B
            for a in range(A):
                grad_f_sp[sp * A + a] += (coef * pi_probs_sp[b * A + a]) * clip_mask(f[sp * A + a], c.v_lo, c.v_hi, c.v_bounded)
        if want_g:
            grad_g[s * c.S + sp] += (-2.0 * delta / B) * reward_slope(c, g, s, sp)
    value[0] = acc / B


cdef void pessimism_grads(Ctx* c, long* idx, double* probs_s, double* f, double* grad, double* value) noexcept nogil:
    cdef int b, a, A = c.A, B = c.B
    cdef long rec, s, act
    cdef double v, acc = 0.0, d
    if c.relative:
        for b in range(B):
            rec = idx[b]
            s = c.a_s[rec]
            act = c.a_a[rec]
            v = 0.0
            for a in range(A):
                v += probs_s[b * A + a] * clipv(f[s * A + a], c.v_lo, c.v_hi, c.v_bounded)
            acc += v - clipv(f[s * A + act], c.v_lo, c.v_hi, c.v_bounded)
            for a in range(A):
                d = probs_s[b * A + a]
                if a == act:
                    d = d - 1.0
                grad[s * A + a] += (d / B) * clip_mask(f[s * A + a], c.v_lo, c.v_hi, c.v_bounded)
        value[0] = acc / B
    else:
        value[0] = 0.0


cdef void initial_value_grads(Ctx* c, double* pi, double* f, double* grad, double* value, double* row) noexcept nogil:
    cdef int s, a, A = c.A
    cdef double v, acc = 0.0
    for s in range(c.S):
        if c.d0[s] == 0:
            continue
        softmax_row(&pi[s * A], row, A)
        v = 0.0
        for a in range(A):
            v += row[a] * clipv(f[s * A + a], c.v_lo, c.v_hi, c.v_bounded)
            grad[s * A + a] += (((1.0 - c.gamma) * c.d0[s]) * row[a]) * clip_mask(f[s * A + a], c.v_lo, c.v_hi, c.v_bounded)
        acc += c.d0[s] * v
    value[0] = (1.0 - c.gamma) * acc


def tabular_steps(double[::1] pi, double[::1] f1, double[::1] f2, double[::1] fb1, double[::1] fb2,
                  double[::1] g, double[:, ::1] m, double[:, ::1] v, long[::1] steps,
                  const double[::1] lr, const double[::1] b1, const double[::1] b2, const double[::1] eps,
                  double[::1] temperature,
                  const long[::1] a_s, const long[::1] a_a, const long[::1] a_sp, const double[::1] a_r,
                  const long[::1] r_s, const double[::1] r_r, const long[::1] r_sp,
                  const long[:, ::1] idx_a, const long[:, ::1] idx_r, const double[::1] term,
                  const double[::1] d0,
                  int S, int A, double gamma, double alpha, double beta, double w, double tau,
                  double eta_fast, double eta_temp, double ent_target,
                  int v_bounded, double v_lo, double v_hi, double r_lo, double r_hi,
                  int relative, int actor_on_data, int reward_source, int warm,
                  double[:, ::1] out):
    """Run ``idx_a.shape[0]`` iterations in place. Net order in m/v/steps: pi, f1, f2, g."""
    cdef int K = idx_a.shape[0]
    cdef int B = idx_a.shape[1]
    cdef int Br = idx_r.shape[1]
    cdef int SA = S * A, SS = S * S
    cdef Ctx c
    cdef Net nets[4]
    cdef double* params[4]
    cdef int k, b, a, i, j
    cdef long rec, s, sp, act
    cdef double vals[2]
    cdef double vp, vd_res, vd_tgt, vr, err, val, ent, ent_acc, vv, temp, dl, qa, q, logp
    cdef double v_pess[2]
    cdef double v_dqra[2]
    cdef int fit_reward, train_reward

    ps_np = np.empty(max(B, 1) * A)
    psp_np = np.empty(max(B, 1) * A)
    row_np = np.empty(A)
    gp_np = np.zeros((2, SA))
    gres_s_np = np.zeros((2, SA))
    gres_sp_np = np.zeros((2, SA))
    gtgt_np = np.zeros((2, SA))
    gf_np = np.zeros((2, SA))
    ggres_np = np.zeros((2, SS))
    ggtgt_np = np.zeros((2, SS))
    ggd_np = np.zeros((2, SS))
    gr_np = np.zeros(SS)
    gg_np = np.zeros(SS)
    gpi_np = np.zeros(SA)
    empty_r = np.zeros(1)
    cdef double[::1] ps = ps_np, psp = psp_np, row = row_np, gr = gr_np, gg = gg_np, gpi = gpi_np
    cdef double[:, ::1] gp = gp_np, gres_s = gres_s_np, gres_sp = gres_sp_np, gtgt = gtgt_np, gf = gf_np
    cdef double[:, ::1] ggres = ggres_np, ggtgt = ggtgt_np, ggd = ggd_np
    cdef const double[::1] a_r_view = a_r if a_r.shape[0] > 0 else empty_r
    cdef double* f_ptr[2]
    cdef long* ia
    cdef long* ir

    c.S = S; c.A = A; c.B = B
    c.relative = relative; c.actor_on_data = actor_on_data; c.reward_source = reward_source
    c.v_bounded = v_bounded; c.v_lo = v_lo; c.v_hi = v_hi; c.r_lo = r_lo; c.r_hi = r_hi
    c.gamma = gamma; c.alpha = alpha; c.beta = beta; c.w = w; c.tau = tau
    c.eta_fast = eta_fast; c.eta_temp = eta_temp; c.ent_target = ent_target
    c.term = <double*>&term[0]; c.d0 = <double*>&d0[0]
    c.a_s = <long*>&a_s[0]; c.a_a = <long*>&a_a[0]; c.a_sp = <long*>&a_sp[0]; c.a_r = <double*>&a_r_view[0]
    c.n_r = r_s.shape[0]
    if c.n_r > 0:
        c.r_s = <long*>&r_s[0]; c.r_r = <double*>&r_r[0]; c.r_sp = <long*>&r_sp[0]
    params[0] = &pi[0]; params[1] = &f1[0]; params[2] = &f2[0]; params[3] = &g[0]
    for i in range(4):
        nets[i].p = params[i]
        nets[i].m = &m[i, 0]
        nets[i].v = &v[i, 0]
        nets[i].lr = lr[i]
        nets[i].b1 = b1[i]
        nets[i].b2 = b2[i]
        nets[i].eps = eps[i]
        nets[i].step = steps[i]
        nets[i].n = SS if i == 3 else SA
    f_ptr[0] = &f1[0]
    f_ptr[1] = &f2[0]
    train_reward = reward_source == 0
    fit_reward = reward_source != 2 and Br > 0 and c.n_r > 0
    temp = temperature[0]

    with nogil:
        for k in range(K):
            ia = <long*>&idx_a[k, 0]
            ir = <long*>&idx_r[k, 0] if Br > 0 else NULL
            for b in range(B):
                rec = ia[b]
                softmax_row(&pi[c.a_s[rec] * A], &ps[b * A], A)
                softmax_row(&pi[c.a_sp[rec] * A], &psp[b * A], A)
            for j in range(SA):
                gpi[j] = 0.0
            for j in range(SS):
                gr[j] = 0.0
                gg[j] = 0.0
            for i in range(2):
                for j in range(SA):
                    gp[i, j] = 0.0
                    gres_s[i, j] = 0.0
                    gres_sp[i, j] = 0.0
                    gtgt[i, j] = 0.0
                for j in range(SS):
                    ggres[i, j] = 0.0
                    ggtgt[i, j] = 0.0

            # critics (and their reward gradients) from pre-update values
            for i in range(2):
                if not warm:
                    if relative:
                        pessimism_grads(&c, ia, &ps[0], f_ptr[i], &gp[i, 0], &vp)
                    else:
                        initial_value_grads(&c, &pi[0], f_ptr[i], &gp[i, 0], &vp, &row[0])
                else:
                    vp = 0.0
                td_grads(&c, ia, &psp[0], f_ptr[i], f_ptr[i], f_ptr[i], 1, &g[0], &gres_s[i, 0],
                         &gres_sp[i, 0], &ggres[i, 0], train_reward and not warm, &vd_res)
                td_grads(&c, ia, &psp[0], f_ptr[i], &fb1[0], &fb2[0], 0, &g[0], &gtgt[i, 0],
                         NULL, &ggtgt[i, 0], train_reward and not warm, &vd_tgt)
                v_dqra[i] = (1.0 - w) * vd_res + w * vd_tgt
                for j in range(SA):
                    dl = (1.0 - w) * (gres_s[i, j] + gres_sp[i, j]) + w * gtgt[i, j]
                    if warm:
                        gf[i, j] = dl
                    else:
                        gf[i, j] = gp[i, j] + beta * dl
                if warm:
                    vals[i] = v_dqra[i]
                else:
                    vals[i] = vp + beta * v_dqra[i]
                    if train_reward:
                        for j in range(SS):
                            ggd[i, j] = (1.0 - w) * ggres[i, j] + w * ggtgt[i, j]

            # reward regression
            vr = 0.0
            if (warm and fit_reward) or (not warm and train_reward and fit_reward):
                for b in range(Br):
                    rec = ir[b]
                    s = c.r_s[rec]
                    sp = c.r_sp[rec]
                    err = (c.r_lo + (c.r_hi - c.r_lo) / (1.0 + exp(-g[s * S + sp]))) - c.r_r[rec]
                    vr += err * err
                    gr[s * S + sp] += (2.0 * err / Br) * reward_slope(&c, &g[0], s, sp)
                vr = vr / Br
            if not warm and train_reward:
                for j in range(SS):
                    if fit_reward:
                        gg[j] = alpha * gr[j] + beta * (ggd[0, j] + ggd[1, j])
                    else:
                        gg[j] = beta * (ggd[0, j] + ggd[1, j])
                out[k, 2] = alpha * vr + beta * (v_dqra[0] + v_dqra[1]) if fit_reward else beta * (v_dqra[0] + v_dqra[1])
            elif warm:
                out[k, 2] = vr
            else:
                out[k, 2] = 0.0

            if warm:
                # behavior cloning on the pre-update policy
                val = 0.0
                ent_acc = 0.0
                for b in range(B):
                    rec = ia[b]
                    s = c.a_s[rec]
                    act = c.a_a[rec]
                    val += log(ps[b * A + act])
                    ent_acc += entropy_of(&ps[b * A], A)
                    for a in range(A):
                        dl = ps[b * A + a]
                        if a == act:
                            dl = dl - 1.0
                        gpi[s * A + a] += dl / B
                adam(&nets[0], &gpi[0], eta_fast)
                for i in range(2):
                    adam(&nets[1 + i], &gf[i, 0], nets[1 + i].lr)
                    if v_bounded:
                        for j in range(SA):
                            f_ptr[i][j] = clipv(f_ptr[i][j], v_lo, v_hi, 1)
                if fit_reward:
                    adam(&nets[3], &gr[0], nets[3].lr)
                out[k, 3] = -val / B
                out[k, 4] = ent_acc / B
            else:
                for i in range(2):
                    adam(&nets[1 + i], &gf[i, 0], nets[1 + i].lr)
                    if v_bounded:
                        for j in range(SA):
                            f_ptr[i][j] = clipv(f_ptr[i][j], v_lo, v_hi, 1)
                if train_reward:
                    adam(&nets[3], &gg[0], nets[3].lr)
                # actor against the updated first critic
                val = 0.0
                ent_acc = 0.0
                if actor_on_data:
                    for b in range(B):
                        rec = ia[b]
                        s = c.a_s[rec]
                        act = c.a_a[rec]
                        vv = 0.0
                        for a in range(A):
                            vv += ps[b * A + a] * clipv(f1[s * A + a], v_lo, v_hi, v_bounded)
                        ent = entropy_of(&ps[b * A], A)
                        val += vv - clipv(f1[s * A + act], v_lo, v_hi, v_bounded)
                        ent_acc += ent
                        for a in range(A):
                            q = clipv(f1[s * A + a], v_lo, v_hi, v_bounded)
                            logp = log(ps[b * A + a]) if ps[b * A + a] > 0 else 0.0
                            gpi[s * A + a] += ((-ps[b * A + a]) * (q - vv) + (temp * ps[b * A + a]) * (logp + ent)) / B
                    out[k, 3] = -(val / B) - temp * (ent_acc / B)
                    ent_acc = ent_acc / B
                else:
                    for s in range(S):
                        if d0[s] == 0:
                            continue
                        softmax_row(&pi[s * A], &row[0], A)
                        vv = 0.0
                        for a in range(A):
                            vv += row[a] * clipv(f1[s * A + a], v_lo, v_hi, v_bounded)
                        ent = entropy_of(&row[0], A)
                        val += d0[s] * vv
                        ent_acc += d0[s] * ent
                        for a in range(A):
                            q = clipv(f1[s * A + a], v_lo, v_hi, v_bounded)
                            logp = log(row[a]) if row[a] > 0 else 0.0
                            gpi[s * A + a] += d0[s] * ((-(1.0 - gamma)) * row[a] * (q - vv) + (temp * row[a]) * (logp + ent))
                    out[k, 3] = -(1.0 - gamma) * val - temp * ent_acc
                adam(&nets[0], &gpi[0], nets[0].lr)
                temp = temp + eta_temp * (ent_target - ent_acc)
                if temp < 0.0:
                    temp = 0.0
                out[k, 4] = ent_acc
            for j in range(SA):
                fb1[j] = fb1[j] * (1.0 - tau) + tau * f1[j]
                fb2[j] = fb2[j] * (1.0 - tau) + tau * f2[j]
            out[k, 0] = vals[0]
            out[k, 1] = vals[1]
            out[k, 5] = temp

    for i in range(4):
        steps[i] = nets[i].step
    temperature[0] = temp
