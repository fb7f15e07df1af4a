from dataclasses import dataclass
from enum import Enum, IntEnum


class Domain(Enum):
    SOURCE = "source"
    TARGET = "target"


class Split(Enum):
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


class Scenario(Enum):
    """
    Enum with the adaptation scenarios the synthetic data generator can emulate.
    """
    CROSS_CAMERA = "cross-camera"
    SYNTHETIC_TO_REAL = "synthetic-to-real"
    ADVERSE_WEATHER = "adverse-weather"


class EncoderBranch(IntEnum):
    """BN routing keys of the shared content encoder."""
    SOURCE = 0
    TARGET = 1


class DecoderBranch(IntEnum):
    """BN routing keys of the depth decoder."""
    SOURCE_CONTENT = 0
    TARGET_CONTENT = 1
    TARGET_STYLE = 2


class DepthRoute(Enum):
    SOURCE = "source"
    TARGET = "target"


class DiscriminatorKind(Enum):
    FEATURE = "feature"
    SOURCE_TO_TARGET = "s2t"
    TARGET_TO_SOURCE = "t2s"


@dataclass(frozen=True)
class VariantSpec:
    """
    Switches describing which parts of the framework a training variant uses.

    Attributes:
        use_target (bool): target images enter training (alignment, geometry, smoothness)
        separate_bn (bool): target data is routed to its own BN branches
        decompose (bool): style encoders, generator, translation/reconstruction losses
            and the translated-image depth path are active
        fuse_style (bool): the target style feature is fused into the depth decoder
        style_branch (DecoderBranch): decoder BN branch the style path is routed to
    """
    use_target: bool
    separate_bn: bool
    decompose: bool
    fuse_style: bool
    style_branch: DecoderBranch


class Variant(Enum):
    """
    Enum with the ablation variants, values being the names used in configs and on the CLI.
    """
    SRC_ONLY = "src_only"
    TGT_AL = "tgt_al"
    TGT_CON_2BN = "tgt_con_2bn"
    TGT_CON_2BN_STY = "tgt_con_2bn_sty"
    LFDA_FULL = "lfda_full"

    @property
    def spec(self) -> VariantSpec:
        return _VARIANT_SPECS[self]

    @property
    def label(self) -> str:
        """Row label used in ablation tables."""
        return _VARIANT_LABELS[self]


_VARIANT_SPECS = {
    Variant.SRC_ONLY: VariantSpec(False, False, False, False, DecoderBranch.TARGET_STYLE),
    Variant.TGT_AL: VariantSpec(True, False, False, False, DecoderBranch.TARGET_STYLE),
    Variant.TGT_CON_2BN: VariantSpec(True, True, True, False, DecoderBranch.TARGET_STYLE),
    Variant.TGT_CON_2BN_STY: VariantSpec(True, True, True, True, DecoderBranch.TARGET_CONTENT),
    Variant.LFDA_FULL: VariantSpec(True, True, True, True, DecoderBranch.TARGET_STYLE),
}

_VARIANT_LABELS = {
    Variant.SRC_ONLY: "Src-Only",
    Variant.TGT_AL: "+Tgt+AL",
    Variant.TGT_CON_2BN: "+Tgt+Con+2BN",
    Variant.TGT_CON_2BN_STY: "+Tgt+Con+2BN+Sty",
    Variant.LFDA_FULL: "LFDA",
}
