from enum import IntEnum


class Level(IntEnum):
    """
    Index map of the 7-level model.

    The ground triplet is expressed in the eigenbasis of the ground Hamiltonian:
    G_PLUS is the upper (f_plus) state and G_MINUS the lower (f_minus) state,
    which reduce to |+1> and |-1> for a positive field well above E_gs / gamma_e.
    The excited triplet mirrors the ground labels; S is the metastable singlet.
    """

    G0 = 0
    G_PLUS = 1
    G_MINUS = 2
    E0 = 3
    E_PLUS = 4
    E_MINUS = 5
    S = 6

    @property
    def label(self) -> str:
        return LEVEL_LABELS[self]

    @classmethod
    def ground(cls):
        return (cls.G0, cls.G_PLUS, cls.G_MINUS)

    @classmethod
    def excited(cls):
        return (cls.E0, cls.E_PLUS, cls.E_MINUS)


LEVEL_LABELS = {
    Level.G0: "g0",
    Level.G_PLUS: "g+",
    Level.G_MINUS: "g-",
    Level.E0: "e0",
    Level.E_PLUS: "e+",
    Level.E_MINUS: "e-",
    Level.S: "s",
}

N_LEVELS = len(Level)
