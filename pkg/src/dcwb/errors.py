"""Exception hierarchy. Each class carries the CLI exit code it maps to."""

from __future__ import annotations


class DcwbError(Exception):
    exit_code = 1


class InputError(DcwbError, ValueError):
    """Malformed data, schema or configuration supplied by the caller."""

    exit_code = 2


class SingularSystemError(DcwbError):
    def __init__(self, spec_id, detail: str = "", iteration: int | None = None):
        self.spec_id = spec_id
        self.iteration = iteration
        where = f"learner {spec_id}"
        if iteration is not None:
            where += f" at iteration {iteration}"
        super().__init__(f"penalized system for {where} is not positive definite {detail}".rstrip())


class CalibrationError(DcwbError):
    def __init__(self, df_target: float, df_min: float, df_max: float, spec_id=None):
        self.df_target = df_target
        self.df_min = df_min
        self.df_max = df_max
        self.spec_id = spec_id
        who = f" for learner {spec_id}" if spec_id is not None else ""
        super().__init__(
            f"df target {df_target:g}{who} outside attainable range "
            f"({df_min:.6g}, {df_max:.6g})"
        )


class DegenerateResponseError(DcwbError):
    pass


class ProtocolError(DcwbError):
    pass


class PrivacyRefusal(DcwbError):
    exit_code = 3

    def __init__(self, payload_kind: str, n_contributing: int, level: int, site_id=None, detail: str = ""):
        self.payload_kind = payload_kind
        self.n_contributing = n_contributing
        self.level = level
        self.site_id = site_id
        msg = (
            f"privacy guard refused {payload_kind} from site {site_id}: "
            f"{n_contributing} contributing observations, level {level}"
        )
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class SiteAbort(DcwbError):
    """A site stopped the session; carries the exit code of the site-side failure."""

    def __init__(self, site_id, reason: str, exit_code: int = 1):
        self.site_id = site_id
        self.reason = reason
        self.exit_code = int(exit_code)
        super().__init__(f"site {site_id} aborted: {reason}")
