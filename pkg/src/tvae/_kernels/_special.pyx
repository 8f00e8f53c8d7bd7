# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled gamma-family kernels: log-gamma, digamma, trigamma.

Mirror of ``special_py.py``. The scalar algorithms must stay in lock-step
with that module; it is the reference the tests compare against.
"""

from libc.math cimport log, sin, fma, fabs

cdef double LANCZOS_G = 7.0
cdef double[9] LANCZOS_COEF
LANCZOS_COEF[0] = 0.99999999999980993
LANCZOS_COEF[1] = 676.5203681218851
LANCZOS_COEF[2] = -1259.1392167224028
LANCZOS_COEF[3] = 771.32342877765313
LANCZOS_COEF[4] = -176.61502916214059
LANCZOS_COEF[5] = 12.507343278686905
LANCZOS_COEF[6] = -0.13857109526572012
LANCZOS_COEF[7] = 9.9843695780195716e-6
LANCZOS_COEF[8] = 1.5056327351493116e-7

cdef double LN_SQRT_2PI = 0.9189385332046727
cdef double LN_PI = 1.1447298858494002
cdef double PI = 3.141592653589793

cdef double[7] PSI_SERIES
PSI_SERIES[0] = 1.0 / 12.0
PSI_SERIES[1] = -1.0 / 120.0
PSI_SERIES[2] = 1.0 / 252.0
PSI_SERIES[3] = -1.0 / 240.0
PSI_SERIES[4] = 1.0 / 132.0
PSI_SERIES[5] = -691.0 / 32760.0
PSI_SERIES[6] = 1.0 / 12.0

cdef double[7] PSI1_SERIES
PSI1_SERIES[0] = 1.0 / 6.0
PSI1_SERIES[1] = -1.0 / 30.0
PSI1_SERIES[2] = 1.0 / 42.0
PSI1_SERIES[3] = -1.0 / 30.0
PSI1_SERIES[4] = 5.0 / 66.0
PSI1_SERIES[5] = -691.0 / 2730.0
PSI1_SERIES[6] = 7.0 / 6.0


cdef double _lgamma_positive(double x) nogil:
    cdef double z = x - 1.0
    cdef double a = LANCZOS_COEF[0]
    cdef int i
    for i in range(1, 9):
        a += LANCZOS_COEF[i] / (z + i)
    cdef double t = z + LANCZOS_G + 0.5
    cdef double b = z + 0.5
    cdef double lt = log(t)
    # exact product via fused multiply-add: b*lt = p + perr
    cdef double p = b * lt
    cdef double perr = fma(b, lt, -p)
    # Neumaier-compensated sum of [perr, -t, LN_SQRT_2PI, log(a)] onto p
    cdef double s = p
    cdef double c = 0.0
    cdef double tmp
    cdef double term
    cdef int j
    cdef double[4] terms
    terms[0] = perr
    terms[1] = -t
    terms[2] = LN_SQRT_2PI
    terms[3] = log(a)
    for j in range(4):
        term = terms[j]
        tmp = s + term
        if fabs(s) >= fabs(term):
            c += (s - tmp) + term
        else:
            c += (term - tmp) + s
        s = tmp
    return s + c


cdef double lgamma_scalar(double x) nogil:
    if x < 0.5:
        return LN_PI - log(sin(PI * x)) - _lgamma_positive(1.0 - x)
    return _lgamma_positive(x)


cdef double digamma_scalar(double x) nogil:
    cdef double acc = 0.0
    cdef double r, s
    cdef int i
    while x < 6.0:
        acc -= 1.0 / x
        x += 1.0
    r = 1.0 / (x * x)
    s = 0.0
    for i in range(6, -1, -1):
        s = (s + PSI_SERIES[i]) * r
    return acc + log(x) - 0.5 / x - s


cdef double trigamma_scalar(double x) nogil:
    cdef double acc = 0.0
    cdef double r, s
    cdef int i
    while x < 6.0:
        acc += 1.0 / (x * x)
        x += 1.0
    r = 1.0 / (x * x)
    s = 0.0
    for i in range(6, -1, -1):
        s = (s + PSI1_SERIES[i]) * r
    return acc + 1.0 / x + 0.5 * r + s / x


def lgamma_into(double[::1] x, double[::1] out):
    """Elementwise ln Gamma over a flat f64 buffer; returns first bad index or -1."""
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        if x[i] <= 0.0:
            return i
        out[i] = lgamma_scalar(x[i])
    return -1


def digamma_into(double[::1] x, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        if x[i] <= 0.0:
            return i
        out[i] = digamma_scalar(x[i])
    return -1


def trigamma_into(double[::1] x, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    for i in range(n):
        if x[i] <= 0.0:
            return i
        out[i] = trigamma_scalar(x[i])
    return -1
