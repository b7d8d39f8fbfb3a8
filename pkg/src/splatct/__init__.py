"""6D Gaussian splatting engine for CT volumes.

Pipeline: volume ingestion and transfer-function channels (:mod:`.volume`),
anatomy-guided scene initialization (:mod:`.priming`), tile-based
differentiable rendering (:mod:`.raster`, :mod:`.diffrender`), image metrics
(:mod:`.metrics`), scene persistence (:mod:`.sceneio`) and an HTTP render
service (:mod:`.service`). The command line front end lives in :mod:`.cli`,
a synthetic test volume in :mod:`.phantom` and the throughput benchmark in
:mod:`.bench`.
"""

__version__ = "0.1.0"
