"""Independent high-precision evaluation of the decoy-state bound chain.

Used to produce the frozen reference values in the tests; kept so they can be
regenerated with ``python3 tests/oracle.py``.
"""

import mpmath as mp

mp.mp.dps = 50


def h2(x):
    x = mp.mpf(x)
    if x in (0, 1):
        return mp.mpf(0)
    return -x * mp.log(x, 2) - (1 - x) * mp.log(1 - x, 2)


def chain(mu, nu1, nu2, q_mu, q_nu1, q_nu2, eps_mu, n_signal, duration, f_ec="1.10"):
    mu, nu1, nu2, q_mu, q_nu1, q_nu2, eps_mu, n_signal, duration, f_ec = (
        mp.mpf(v) for v in (mu, nu1, nu2, q_mu, q_nu1, q_nu2, eps_mu, n_signal, duration, f_ec))
    e = mp.e
    y0 = max(mp.mpf(0), (nu1 * q_nu2 * e ** nu2 - nu2 * q_nu1 * e ** nu1) / (nu1 - nu2))
    pre = mu ** 2 * e ** -mu / (mu * nu1 - mu * nu2 - nu1 ** 2 + nu2 ** 2)
    q1 = pre * (q_nu1 * e ** nu1 - q_nu2 * e ** nu2 - (nu1 ** 2 - nu2 ** 2) / mu ** 2 * (q_mu * e ** mu - y0))
    q1 = min(mp.mpf(1), max(mp.mpf(0), q1))
    e1 = min(mp.mpf("0.5"), max(mp.mpf(0), (eps_mu * q_mu * e ** mu - y0 / 2) / (q1 * e ** mu)))
    rate = max(mp.mpf(0), n_signal / 2 * (-q_mu * f_ec * h2(eps_mu) + q1 * (1 - h2(e1))) / duration)
    return y0, q1, e1, rate


def operating_point_central():
    n_signal = mp.mpf("1.036e9") * mp.mpf("2.3") * mp.mpf("0.80")
    return chain("0.55", "0.10", "7.5e-4", "8.680e-3", "1.970e-3", "4.470e-4", "0.0253", n_signal, "2.3")


if __name__ == "__main__":
    for name, v in zip(("y0_lower", "q1_lower", "eps1_upper", "secure_rate_bps"), operating_point_central()):
        print(name, mp.nstr(v, 15))
    print("h2(0.0253)", mp.nstr(h2("0.0253"), 15))
