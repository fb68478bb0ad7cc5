from roicodec.base.config import Config


class EntropyConfig(Config):
    precision_bits: int = 16
    # coding window half-width in cells is ceil(tail_cells * (sigma / h + 1))
    tail_cells: int = 32
    sigma_min: float = 0.01
    # upper bound on sigma / h when building coding tables; its window must fit precision_bits
    scale_max: float = 256.0
    likelihood_floor: float = 1e-9
    # factorized hyper-latent model
    factorized_filters: tuple = (3, 3, 3)
    factorized_init_scale: float = 10.0
    factorized_tail_mass: float = 1e-9
    factorized_max_range: int = 4096
