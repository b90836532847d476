"""Physical constants (CODATA 2018) and ion species used by the scene module."""

ELEMENTARY_CHARGE = 1.602176634e-19  # C, exact
VACUUM_PERMITTIVITY = 8.8541878128e-12  # F/m
ATOMIC_MASS_UNIT = 1.66053906660e-27  # kg
ELECTRON_MASS_U = 5.48579909065e-4  # u

# neutral atomic masses (AME2016), u
ATOMIC_MASS_U = {
    "9Be": 9.012183065,
    "24Mg": 23.985041697,
    "40Ca": 39.962590863,
    "43Ca": 42.958766430,
    "88Sr": 87.905612253,
    "138Ba": 137.905247,
    "171Yb": 170.936331,
}
