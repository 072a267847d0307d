from typing import Any, Dict, Optional

from fastmcp import FastMCP

from tools.calibrate_profile import CalibrateProfileTool
from tools.evaluate import EvaluateTool
from tools.rank_heads import RankHeadsTool

# Create the MCP instance
mcp = FastMCP("hijacklens")


def _inputs(**fields: Any) -> Dict[str, Any]:
    return {k: v for k, v in fields.items() if v is not None}


@mcp.tool(
    name="calibrate_profile",
    description="Calibrate a hijack profile (anchor words, tau_s, tau_r) over planted toy scenes and write it as JSON."
)
def calibrate_profile(
    scenes: int = 50,
    seed: int = 42,
    out: str = "./artifacts",
    iqr_mult: Optional[float] = None,
    salient_frac: Optional[float] = None,
    skip_salient: bool = False,
) -> Dict[str, Any]:
    """
    Args:
        scenes: Number of scenes in the calibration corpus.
        seed: Run seed for weights and scenes.
        out: Output directory.
        iqr_mult: IQR multiplier for the anchor threshold.
        salient_frac: Attention-mass fraction of salient tokens.
        skip_salient: Use every vision token for the ratio split.
    Returns:
        A dict with profile_path, anchors, tau_s, tau_r, warning, success, error.
    """
    return CalibrateProfileTool().run(_inputs(
        scenes=scenes, seed=seed, out=out, iqr_mult=iqr_mult,
        salient_frac=salient_frac, skip_salient=skip_salient,
    ))


@mcp.tool(
    name="rank_heads",
    description="Rank attention heads by mean non-hijacked visual attention and record the top-K in the profile."
)
def rank_heads(
    k: int = 8,
    seed: int = 42,
    scenes: int = 50,
    out: str = "./artifacts",
    no_gt: bool = False,
) -> Dict[str, Any]:
    """
    Args:
        k: Number of target heads.
        seed: Run seed; must match the calibration run.
        scenes: Number of scenes to rank over.
        out: Directory holding profile.json.
        no_gt: Rank over all object steps instead of real-object steps.
    Returns:
        A dict with profile_path, h_target, har_real_mean, har_hal_mean, success, error.
    """
    return RankHeadsTool().run(_inputs(k=k, seed=seed, scenes=scenes, out=out, no_gt=no_gt))


@mcp.tool(
    name="evaluate_interventions",
    description="Compare baseline and attention-enhanced decoding on toy scenes and write the evaluation report."
)
def evaluate_interventions(
    alpha: float = 0.1,
    beta: float = 0.0,
    seed: int = 42,
    scenes: int = 50,
    out: str = "./artifacts",
    compare_persist: bool = False,
) -> Dict[str, Any]:
    """
    Args:
        alpha: Enhancement strength.
        beta: Inert penalty in [0, 1].
        seed: Run seed; must match the calibration run.
        scenes: Number of scenes to evaluate.
        out: Directory holding profile.json.
        compare_persist: Also score identified tokens against persistent sets.
    Returns:
        A dict with report_path, report, success, error.
    """
    return EvaluateTool().run(_inputs(
        alpha=alpha, beta=beta, seed=seed, scenes=scenes, out=out, compare_persist=compare_persist,
    ))


if __name__ == "__main__":
    mcp.run(transport="stdio")
