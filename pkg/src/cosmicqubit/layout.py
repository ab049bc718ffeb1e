"""Default experiment layout and rates: six scintillators, the qubit chip and ten qubits."""

from .geometry import DepositionModel, Prism, Scene

# label: (dims cm, center cm, a ADC/MeV, b fractional @5 MeV, V_lo, V_hi)
DETECTORS = {
    "A": ((51.0, 7.2, 2.0), (-13.07, 6.59, -43.77), 14.971, 0.063, 50.0, 450.0),
    "B": ((51.0, 7.2, 2.0), (-13.07, -0.61, -44.06), 12.219, 0.015, 35.0, 400.0),
    "C": ((60.0, 7.0, 7.0), (-8.57, -0.61, -48.88), 14.219, 0.016, 170.0, 550.0),
    "D": ((60.0, 7.0, 7.0), (-8.57, -0.61, -56.51), 14.832, 0.113, 170.0, 550.0),
    "E": ((100.0, 5.72, 6.0), (-5.67, 5.75, -49.51), 17.465, 0.118, 170.0, 400.0),
    "F": ((100.0, 5.72, 6.0), (-5.67, 5.75, -57.01), 21.700, 0.084, 200.0, 400.0),
}

# chip substrate: 0.35 mm thick silicon standing vertically, normal along x
CHIP_LABEL = "Q"
CHIP_DIMS = (0.035, 0.5, 0.5)
CHIP_DE_DX = 1.9  # MeV/cm, minimum-ionizing silicon

# (T1 s, recovery tau s)
QUBITS = {
    "Q1": (53e-6, 5.9e-3),
    "Q2": (49e-6, 6.6e-3),
    "Q3": (42e-6, 0.8e-3),
    "Q4": (16e-6, 6.5e-3),
    "Q5": (40e-6, 6.0e-3),
    "Q6": (43e-6, 0.8e-3),
    "Q7": (57e-6, 0.7e-3),
    "Q8": (55e-6, 6.5e-3),
    "Q9": (69e-6, 0.7e-3),
    "Q10": (47e-6, 0.8e-3),
}

FLUX = 0.0133  # s^-1 cm^-2
DETECTOR_EFFICIENCY = 0.96
EVENT_RATE = 1.0 / 101.43  # all correlated qubit events, s^-1
COSMIC_FRACTION = 0.171

# where the two muon samples are centered (cm) and how wide they are
DETECTOR_FOCUS = dict(center=(0.0, 0.0, -60.0), side=200.0)
CHIP_FOCUS = dict(center=(0.0, 0.0, 0.0), side=10.0)


def default_scene(secondary_boost: float = 1.0, with_chip: bool = True) -> Scene:
    prisms = []
    if with_chip:
        prisms.append(Prism.from_dims(CHIP_LABEL, CHIP_DIMS, (0.0, 0.0, 0.0)))
    for lab, (dims, pos, *_) in DETECTORS.items():
        prisms.append(Prism.from_dims(lab, dims, pos))
    model = DepositionModel(de_dx=2.0, secondary_boost=secondary_boost, de_dx_by_label={CHIP_LABEL: CHIP_DE_DX})
    return Scene(tuple(prisms), model)
