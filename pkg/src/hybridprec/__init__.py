"""Hybrid precoding for mmWave massive MIMO.

Saleh-Valenzuela channel generation, geometric mean decomposition,
constant-modulus precoder factorization trained by SGD with momentum
(directly and through an MLP autoencoder), and a Monte-Carlo harness
for BER, spectral-efficiency and MSE-convergence curves.
"""

from hybridprec.channel import (
    ChannelRealization,
    PathParams,
    draw_channel,
    generate_channel,
    sample_path_params,
    steering_vector,
)
from hybridprec.decomp import GmdFactors, RankDeficiencyError, SvdFactors, geometric_mean_sigma, gmd, svd
from hybridprec.dnn import (
    Dataset,
    LayerSpec,
    Mlp,
    build_dataset,
    build_precoder_mlp,
    default_architecture,
    infer_precoders,
    load_mlp,
    save_mlp,
    train,
)
from hybridprec.precoder import (
    FactorizeConfig,
    FactorizeResult,
    HybridFactors,
    SystemDims,
    factorize_sgd,
    factorize_sgd_batch,
    fully_digital_gmd,
    fully_digital_svd,
    hybrid_loss,
    phase_project,
    phase_projection_baseline,
    power_normalize,
    precoder_mse,
)
from hybridprec.simulate import (
    SCHEME_IDS,
    BerCurve,
    MseCurve,
    SeCurve,
    ber_curve,
    mse_vs_iterations,
    qpsk_demap,
    qpsk_map,
    se_curve,
    sic_detect,
    spectral_efficiency,
    transmit,
)

__version__ = "0.1.0"
