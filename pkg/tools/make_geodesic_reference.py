"""Generate high-precision reference distances for the geodesic test pairs.

Independent of the library's own distance code: integrates the geodesic
ODEs on the WGS-84 ellipsoid (geodetic latitude / longitude / azimuth as
functions of arc length) with a high-order adaptive integrator, then
solves the two-point problem by shooting on (initial azimuth, length).

Run from the repo root:

    python tools/make_geodesic_reference.py

and paste the printed tuples into tests/test_geo.py. Requires scipy
(available in the dev environment, not a package dependency).
"""

import math

import numpy as np
from scipy.integrate import quad, solve_ivp
from scipy.optimize import root

A = 6378137.0
F = 1 / 298.257223563
E2 = F * (2 - F)


def _ode(_s, y):
    phi, _lam, alpha = y
    w2 = 1 - E2 * math.sin(phi) ** 2
    w = math.sqrt(w2)
    m = A * (1 - E2) / (w2 * w)   # meridional radius of curvature
    n = A / w                     # prime vertical radius of curvature
    return [
        math.cos(alpha) / m,
        math.sin(alpha) / (n * math.cos(phi)),
        math.sin(alpha) * math.tan(phi) / n,
    ]


def _endpoint(phi1, lam1, alpha0, s):
    sol = solve_ivp(
        _ode, (0.0, s), [phi1, lam1, alpha0],
        method="DOP853", rtol=1e-13, atol=1e-14,
    )
    return sol.y[0, -1], sol.y[1, -1]


def _wrap(x):
    return (x + math.pi) % (2 * math.pi) - math.pi


def inverse_distance(lat1, lng1, lat2, lng2):
    """Shortest-path distance in meters by shooting on (azimuth, length)."""
    phi1, lam1 = math.radians(lat1), math.radians(lng1)
    phi2, lam2 = math.radians(lat2), math.radians(lng2)
    if phi1 == phi2 and lam1 == lam2:
        return 0.0

    # spherical initial guess
    dlam = lam2 - lam1
    sig = math.acos(
        min(1.0, max(-1.0, math.sin(phi1) * math.sin(phi2)
                     + math.cos(phi1) * math.cos(phi2) * math.cos(dlam)))
    )
    alpha_guess = math.atan2(
        math.sin(dlam) * math.cos(phi2),
        math.cos(phi1) * math.sin(phi2)
        - math.sin(phi1) * math.cos(phi2) * math.cos(dlam),
    )
    s_guess = 6371008.8 * sig

    def residual(x):
        alpha0, s = x
        phi_e, lam_e = _endpoint(phi1, lam1, alpha0, abs(s))
        return [phi_e - phi2, _wrap(lam_e - lam2)]

    sol = root(residual, [alpha_guess, s_guess], method="hybr", tol=1e-12)
    res = residual(sol.x)
    # residual is in radians; 1.0e-11 rad is ~0.06 mm on the surface
    if max(abs(res[0]), abs(res[1])) > 1.0e-11:
        raise RuntimeError(f"poor fit for {(lat1, lng1, lat2, lng2)}: residual {res}")
    return abs(sol.x[1])


def meridian_arc(lat_deg):
    """Meridian arc length from the equator by direct quadrature."""
    phi = math.radians(lat_deg)
    val, err = quad(
        lambda t: A * (1 - E2) / (1 - E2 * math.sin(t) ** 2) ** 1.5,
        0.0, phi, epsabs=1e-10, epsrel=1e-13,
    )
    assert err < 1e-6
    return val


PAIRS = [
    (0.0, 0.0, 0.0, 1.0),
    (0.0, 0.0, 1.0, 0.0),
    (39.9042, 116.4074, 39.9142, 116.4174),
    (40.0, 116.3, 40.1, 116.5),
    (51.4778, -0.0015, 48.8584, 2.2945),
    (35.6762, 139.6503, 37.5665, 126.978),
    (-33.8688, 151.2093, -37.8136, 144.9631),
    (64.1466, -21.9426, 59.9139, 10.7522),
    (1.3521, 103.8198, 1.2903, 103.852),
    (55.7558, 37.6173, 59.9311, 30.3609),
    (-1.2921, 36.8219, -6.7924, 39.2083),
    (19.4326, -99.1332, 19.0414, -98.2063),
    (37.7749, -122.4194, 34.0522, -118.2437),
    (52.52, 13.405, 48.1351, 11.582),
    (-22.9068, -43.1729, -23.5505, -46.6333),
    (78.2232, 15.6267, 69.6492, 18.9553),
    (-54.8019, -68.303, -51.6226, -69.2181),
    (31.2304, 121.4737, 39.9042, 116.4074),
    (45.0, 0.0, -45.0, 60.0),
    (10.0, -20.0, 10.0, -19.0),
]


def main():
    # sanity anchors: equatorial arc is exactly a * dlam; meridian by quadrature
    print(f"# equator 1 deg closed form : {A * math.pi / 180:.6f}")
    print(f"# meridian 1 deg quadrature : {meridian_arc(1.0):.6f}")
    print()
    for p in PAIRS:
        d = inverse_distance(*p)
        print(f"    ({p[0]!r}, {p[1]!r}, {p[2]!r}, {p[3]!r}, {d!r}),")


if __name__ == "__main__":
    main()
