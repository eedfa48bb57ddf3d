########################
# Input Validation     #
########################

from dataclasses import dataclass
import math
from typing import Any, List, Optional

from app.exceptions import ValidationError


@dataclass
class RecordValidator:
    """Validates and converts the raw fields of one logged unit."""

    @staticmethod
    def validate_real(value: Any, field: str, row: Optional[int] = None) -> float:
        """
        Convert a raw value to a finite float.

        Args:
            value: Raw value (number or numeric string).
            field: Field name, reported on failure.
            row: 1-based data row, reported on failure.

        Returns:
            float: The converted value.

        Raises:
            ValidationError: If the value is not numeric or not finite.
        """
        try:
            if isinstance(value, str):
                value = value.strip()
            if isinstance(value, bool):
                raise TypeError("boolean is not a real value")
            number = float(value)
        except (TypeError, ValueError) as e:
            raise ValidationError(f"Invalid number format: {value!r}", row=row, field=field) from e
        if not math.isfinite(number):
            raise ValidationError("Non-finite value", row=row, field=field)
        return number

    @staticmethod
    def validate_time(value: Any, row: Optional[int] = None) -> int:
        """
        Convert a raw time index to a positive integer.

        Raises:
            ValidationError: If the value is not a positive integer.
        """
        number = RecordValidator.validate_real(value, 't', row)
        if number != int(number) or number < 1:
            raise ValidationError(f"Time index must be a positive integer, got {value!r}", row=row, field='t')
        return int(number)

    @staticmethod
    def validate_treatment(value: Any, row: Optional[int] = None) -> int:
        """
        Convert a raw treatment indicator to 0 or 1.

        Raises:
            ValidationError: If the value is not binary.
        """
        number = RecordValidator.validate_real(value, 'a', row)
        if number not in (0.0, 1.0):
            raise ValidationError(f"Non-binary treatment {value!r}", row=row, field='a')
        return int(number)

    @staticmethod
    def validate_propensity(value: Any, row: Optional[int] = None) -> float:
        """
        Convert a raw executed propensity, rejecting the closed endpoints.

        Propensities of exactly 0 or 1 are rejected rather than clamped, so a
        logging bug is surfaced instead of silently repaired.

        Raises:
            ValidationError: If the value is outside (0, 1).
        """
        number = RecordValidator.validate_real(value, 'pi', row)
        if not 0.0 < number < 1.0:
            raise ValidationError(f"propensity out of open interval (0, 1): {number!r}", row=row, field='pi')
        return number

    @staticmethod
    def validate_covariates(values: Any, row: Optional[int] = None) -> List[float]:
        """
        Convert a raw covariate vector to a list of finite floats.

        Raises:
            ValidationError: If the value is not a sequence of finite numbers.
        """
        if values is None:
            return []
        if isinstance(values, (str, bytes)) or not hasattr(values, '__iter__'):
            raise ValidationError(f"Covariates must be an array, got {values!r}", row=row, field='x')
        return [
            RecordValidator.validate_real(v, f"x{j + 1}", row)
            for j, v in enumerate(values)
        ]
