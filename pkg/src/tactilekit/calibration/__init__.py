from .bundle import CalibrationBundle, ReferenceCloud, SlopeJacobian, load_bundle, save_bundle
from .homography import SingularHomographyError, apply_homography, four_point_homography, patch_homography
from .hough import NoContactError, detect_circle
from .lut import LookupTable, TableBuilder, TableMissingError, lookup_gradient
from .procedure import (CalibrationIncompleteError, CalibrationReport, CalibrationSettings,
                        PokeRecord, PokeTarget, build_correspondence, build_lookup_table,
                        calibrate, plan_poke_schedule)
