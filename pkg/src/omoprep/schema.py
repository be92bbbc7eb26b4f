"""OMOP CDM v5.3 table schemas, typed records and field parsing."""

from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, datetime, time
from typing import Dict, List, Optional, Sequence, Tuple

ID = "id"
CONCEPT = "concept-id"
DATETIME = "datetime"
DATE = "date"
NUMERIC = "numeric"
TEXT = "text"

SEMANTIC_TYPES = (ID, CONCEPT, DATETIME, DATE, NUMERIC, TEXT)

ICU_CONCEPT_IDS = frozenset({581379, 32037})

# Not processed by any stage; copied through untouched.
PASSTHROUGH_TABLES = ("LOCATION", "CARE_SITE", "PROVIDER")


class SchemaError(ValueError):
    pass


class ParseError(ValueError):
    """Structural row failure. Carries the row index so the row can be audited."""

    def __init__(self, kind: str, row_index: Optional[int], detail: str = ""):
        self.kind = kind
        self.row_index = row_index
        self.detail = detail
        super().__init__(f"{kind} at row {row_index}: {detail}")


@dataclass(frozen=True)
class TableSchema:
    table_name: str
    columns: Tuple[Tuple[str, str], ...]
    primary_concept_column: Optional[str] = None
    start_column: Optional[str] = None
    start_date_column: Optional[str] = None
    end_column: Optional[str] = None
    end_date_column: Optional[str] = None
    id_column: Optional[str] = None

    @property
    def column_names(self) -> List[str]:
        return [c for c, _ in self.columns]

    @property
    def types(self) -> Dict[str, str]:
        return dict(self.columns)

    @property
    def cleanable(self) -> bool:
        return self.primary_concept_column is not None

    @property
    def patient_linked(self) -> bool:
        return "person_id" in self.types

    def required_columns(self) -> List[str]:
        """Columns every stage relies on; these are never dropped and must be in the header."""
        req = []
        for c in (self.id_column, "person_id" if self.patient_linked else None,
                  self.primary_concept_column, self.start_column, self.start_date_column,
                  self.end_column, self.end_date_column):
            if c and c not in req:
                req.append(c)
        return req

    def datetime_columns(self) -> List[str]:
        return [c for c, t in self.columns if t in (DATETIME, DATE)]


def _cols(spec: str) -> Tuple[Tuple[str, str], ...]:
    out = []
    for item in spec.split():
        name, _, kind = item.partition(":")
        out.append((name, {"i": ID, "c": CONCEPT, "dt": DATETIME, "d": DATE,
                           "n": NUMERIC, "t": TEXT}[kind]))
    return tuple(out)


_REGISTRY_SPEC = {
    "PERSON": dict(
        columns="person_id:i gender_concept_id:c year_of_birth:n month_of_birth:n day_of_birth:n "
                "birth_datetime:dt race_concept_id:c ethnicity_concept_id:c location_id:i provider_id:i "
                "care_site_id:i person_source_value:t gender_source_value:t gender_source_concept_id:c "
                "race_source_value:t race_source_concept_id:c ethnicity_source_value:t "
                "ethnicity_source_concept_id:c",
        primary_concept_column="gender_concept_id", start_column="birth_datetime",
        id_column="person_id"),
    "OBSERVATION_PERIOD": dict(
        columns="observation_period_id:i person_id:i observation_period_start_date:d "
                "observation_period_end_date:d period_type_concept_id:c",
        primary_concept_column="period_type_concept_id",
        start_date_column="observation_period_start_date",
        end_date_column="observation_period_end_date", id_column="observation_period_id"),
    "VISIT_OCCURRENCE": dict(
        columns="visit_occurrence_id:i person_id:i visit_concept_id:c visit_start_date:d "
                "visit_start_datetime:dt visit_end_date:d visit_end_datetime:dt visit_type_concept_id:c "
                "provider_id:i care_site_id:i visit_source_value:t visit_source_concept_id:c "
                "admitting_source_concept_id:c admitting_source_value:t discharge_to_concept_id:c "
                "discharge_to_source_value:t preceding_visit_occurrence_id:i",
        primary_concept_column="visit_concept_id", start_column="visit_start_datetime",
        start_date_column="visit_start_date", end_column="visit_end_datetime",
        end_date_column="visit_end_date", id_column="visit_occurrence_id"),
    "VISIT_DETAIL": dict(
        columns="visit_detail_id:i person_id:i visit_detail_concept_id:c visit_detail_start_date:d "
                "visit_detail_start_datetime:dt visit_detail_end_date:d visit_detail_end_datetime:dt "
                "visit_detail_type_concept_id:c provider_id:i care_site_id:i "
                "admitting_source_concept_id:c discharge_to_concept_id:c preceding_visit_detail_id:i "
                "visit_detail_source_value:t visit_detail_source_concept_id:c admitting_source_value:t "
                "discharge_to_source_value:t visit_detail_parent_id:i visit_occurrence_id:i",
        primary_concept_column="visit_detail_concept_id",
        start_column="visit_detail_start_datetime", start_date_column="visit_detail_start_date",
        end_column="visit_detail_end_datetime", end_date_column="visit_detail_end_date",
        id_column="visit_detail_id"),
    "CONDITION_OCCURRENCE": dict(
        columns="condition_occurrence_id:i person_id:i condition_concept_id:c condition_start_date:d "
                "condition_start_datetime:dt condition_end_date:d condition_end_datetime:dt "
                "condition_type_concept_id:c stop_reason:t provider_id:i visit_occurrence_id:i "
                "visit_detail_id:i condition_source_value:t condition_source_concept_id:c "
                "condition_status_source_value:t condition_status_concept_id:c",
        primary_concept_column="condition_concept_id", start_column="condition_start_datetime",
        start_date_column="condition_start_date", end_column="condition_end_datetime",
        end_date_column="condition_end_date", id_column="condition_occurrence_id"),
    "DRUG_EXPOSURE": dict(
        columns="drug_exposure_id:i person_id:i drug_concept_id:c drug_exposure_start_date:d "
                "drug_exposure_start_datetime:dt drug_exposure_end_date:d drug_exposure_end_datetime:dt "
                "verbatim_end_date:d drug_type_concept_id:c stop_reason:t refills:n quantity:n "
                "days_supply:n sig:t route_concept_id:c lot_number:t provider_id:i "
                "visit_occurrence_id:i visit_detail_id:i drug_source_value:t drug_source_concept_id:c "
                "route_source_value:t dose_unit_source_value:t",
        primary_concept_column="drug_concept_id", start_column="drug_exposure_start_datetime",
        start_date_column="drug_exposure_start_date", end_column="drug_exposure_end_datetime",
        end_date_column="drug_exposure_end_date", id_column="drug_exposure_id"),
    "PROCEDURE_OCCURRENCE": dict(
        columns="procedure_occurrence_id:i person_id:i procedure_concept_id:c procedure_date:d "
                "procedure_datetime:dt procedure_type_concept_id:c modifier_concept_id:c quantity:n "
                "provider_id:i visit_occurrence_id:i visit_detail_id:i procedure_source_value:t "
                "procedure_source_concept_id:c modifier_source_value:t",
        primary_concept_column="procedure_concept_id", start_column="procedure_datetime",
        start_date_column="procedure_date", id_column="procedure_occurrence_id"),
    "DEVICE_EXPOSURE": dict(
        columns="device_exposure_id:i person_id:i device_concept_id:c device_exposure_start_date:d "
                "device_exposure_start_datetime:dt device_exposure_end_date:d "
                "device_exposure_end_datetime:dt device_type_concept_id:c unique_device_id:t "
                "quantity:n provider_id:i visit_occurrence_id:i visit_detail_id:i "
                "device_source_value:t device_source_concept_id:c",
        primary_concept_column="device_concept_id", start_column="device_exposure_start_datetime",
        start_date_column="device_exposure_start_date", end_column="device_exposure_end_datetime",
        end_date_column="device_exposure_end_date", id_column="device_exposure_id"),
    "MEASUREMENT": dict(
        columns="measurement_id:i person_id:i measurement_concept_id:c measurement_date:d "
                "measurement_datetime:dt measurement_time:t measurement_type_concept_id:c "
                "operator_concept_id:c value_as_number:n value_as_concept_id:c unit_concept_id:c "
                "range_low:n range_high:n provider_id:i visit_occurrence_id:i visit_detail_id:i "
                "measurement_source_value:t measurement_source_concept_id:c unit_source_value:t "
                "value_source_value:t",
        primary_concept_column="measurement_concept_id", start_column="measurement_datetime",
        start_date_column="measurement_date", id_column="measurement_id"),
    "OBSERVATION": dict(
        columns="observation_id:i person_id:i observation_concept_id:c observation_date:d "
                "observation_datetime:dt observation_type_concept_id:c value_as_number:n "
                "value_as_string:t value_as_concept_id:c qualifier_concept_id:c unit_concept_id:c "
                "provider_id:i visit_occurrence_id:i visit_detail_id:i observation_source_value:t "
                "observation_source_concept_id:c unit_source_value:t qualifier_source_value:t",
        primary_concept_column="observation_concept_id", start_column="observation_datetime",
        start_date_column="observation_date", id_column="observation_id"),
    "DEATH": dict(
        columns="person_id:i death_date:d death_datetime:dt death_type_concept_id:c "
                "cause_concept_id:c cause_source_value:t cause_source_concept_id:c",
        primary_concept_column="death_type_concept_id", start_column="death_datetime",
        start_date_column="death_date", id_column="person_id"),
    "SPECIMEN": dict(
        columns="specimen_id:i person_id:i specimen_concept_id:c specimen_type_concept_id:c "
                "specimen_date:d specimen_datetime:dt quantity:n unit_concept_id:c "
                "anatomic_site_concept_id:c disease_status_concept_id:c specimen_source_id:t "
                "specimen_source_value:t unit_source_value:t anatomic_site_source_value:t "
                "disease_status_source_value:t",
        primary_concept_column="specimen_concept_id", start_column="specimen_datetime",
        start_date_column="specimen_date", id_column="specimen_id"),
    "CONDITION_ERA": dict(
        columns="condition_era_id:i person_id:i condition_concept_id:c condition_era_start_date:d "
                "condition_era_end_date:d condition_occurrence_count:n",
        primary_concept_column="condition_concept_id", start_date_column="condition_era_start_date",
        end_date_column="condition_era_end_date", id_column="condition_era_id"),
    "DRUG_ERA": dict(
        columns="drug_era_id:i person_id:i drug_concept_id:c drug_era_start_date:d "
                "drug_era_end_date:d drug_exposure_count:n gap_days:n",
        primary_concept_column="drug_concept_id", start_date_column="drug_era_start_date",
        end_date_column="drug_era_end_date", id_column="drug_era_id"),
    "LOCATION": dict(
        columns="location_id:i address_1:t address_2:t city:t state:t zip:t county:t "
                "location_source_value:t",
        id_column="location_id"),
    "CARE_SITE": dict(
        columns="care_site_id:i care_site_name:t place_of_service_concept_id:c location_id:i "
                "care_site_source_value:t place_of_service_source_value:t",
        id_column="care_site_id"),
    "PROVIDER": dict(
        columns="provider_id:i provider_name:t npi:t dea:t specialty_concept_id:c care_site_id:i "
                "year_of_birth:n gender_concept_id:c provider_source_value:t "
                "specialty_source_value:t specialty_source_concept_id:c gender_source_value:t "
                "gender_source_concept_id:c",
        id_column="provider_id"),
}

TABLE_NAMES = tuple(_REGISTRY_SPEC)
CLEANABLE_TABLES = tuple(t for t in TABLE_NAMES if t not in PASSTHROUGH_TABLES)
MAPPED_TABLES = ("MEASUREMENT", "OBSERVATION", "PROCEDURE_OCCURRENCE", "DEVICE_EXPOSURE")
VISIT_TABLES = ("VISIT_OCCURRENCE", "VISIT_DETAIL")


class SchemaRegistry(dict):
    """Mapping of table name to TableSchema; lookups are case-insensitive and reject unknowns."""

    def __getitem__(self, name: str) -> TableSchema:
        key = name.upper()
        if not dict.__contains__(self, key):
            raise SchemaError(f"unknown OMOP table: {name!r}")
        return dict.__getitem__(self, key)

    def __contains__(self, name) -> bool:
        return isinstance(name, str) and dict.__contains__(self, name.upper())

    def get(self, name, default=None):
        return self[name] if name in self else default


_REGISTRY: Optional[SchemaRegistry] = None


def load_schema_registry() -> SchemaRegistry:
    global _REGISTRY
    if _REGISTRY is None:
        reg = SchemaRegistry()
        for name, spec in _REGISTRY_SPEC.items():
            spec = dict(spec)
            reg[name] = TableSchema(table_name=name, columns=_cols(spec.pop("columns")), **spec)
        _REGISTRY = reg
    return _REGISTRY


def get_schema(name: str) -> TableSchema:
    return load_schema_registry()[name]


# ---------------------------------------------------------------- field parsing

def parse_int(text: str) -> Optional[int]:
    text = text.strip()
    if not text:
        return None
    try:
        return int(text)
    except ValueError:
        try:
            f = float(text)
        except ValueError:
            return None
        return int(f) if f.is_integer() else None


def parse_float(text: str) -> Optional[float]:
    text = text.strip()
    if not text:
        return None
    try:
        v = float(text)
    except ValueError:
        return None
    return None if v != v else v


def parse_datetime(text: str) -> Optional[datetime]:
    """ISO-8601 or 'YYYY-MM-DD HH:MM:SS'; a bare date expands to midnight.

    Raises ValueError for non-empty text that is not a timestamp.
    """
    text = text.strip()
    if not text:
        return None
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is not None:
        dt = dt.replace(tzinfo=None)
    return dt.replace(microsecond=0)


def format_datetime(dt: Optional[datetime]) -> str:
    return "" if dt is None else dt.strftime("%Y-%m-%dT%H:%M:%S")


def format_date(d) -> str:
    if d is None:
        return ""
    if isinstance(d, datetime):
        d = d.date()
    return d.isoformat()


def format_float(v: Optional[float]) -> str:
    return "" if v is None else repr(float(v))


def format_int(v: Optional[int]) -> str:
    return "" if v is None else str(int(v))


@dataclass
class Record:
    """One parsed OMOP row. ``fields`` keeps every source column verbatim."""

    table_name: str
    person_id: Optional[int]
    concept_id: Optional[int]
    value_as_number: Optional[float] = None
    unit_concept_id: Optional[int] = None
    unit_source_value: Optional[str] = None
    start_datetime: Optional[datetime] = None
    end_datetime: Optional[datetime] = None
    end_is_date: bool = False
    fields: Dict[str, str] = field(default_factory=dict)
    row_index: Optional[int] = None


def _event_time(schema: TableSchema, values: Dict[str, str], dt_col, date_col):
    if dt_col and values.get(dt_col, "").strip():
        return parse_datetime(values[dt_col]), False
    if date_col and values.get(date_col, "").strip():
        return parse_datetime(values[date_col]), True
    return None, False


def parse_record(schema: TableSchema, raw_row: Sequence[str],
                 columns: Optional[Sequence[str]] = None,
                 row_index: Optional[int] = None) -> Record:
    """Parse one delimited row against ``schema``.

    ``columns`` is the file header when it differs from the schema order (extra
    site columns are carried in ``fields`` untouched).
    """
    columns = list(columns) if columns is not None else schema.column_names
    if len(raw_row) != len(columns):
        raise ParseError("field_count", row_index,
                         f"expected {len(columns)} fields, got {len(raw_row)}")
    values = dict(zip(columns, raw_row))
    try:
        start, _ = _event_time(schema, values, schema.start_column, schema.start_date_column)
        end, end_is_date = _event_time(schema, values, schema.end_column, schema.end_date_column)
    except ValueError as exc:
        raise ParseError("datetime", row_index, str(exc)) from None
    pc = schema.primary_concept_column
    unit = values.get("unit_source_value")
    return Record(
        table_name=schema.table_name,
        person_id=parse_int(values["person_id"]) if "person_id" in values else None,
        concept_id=parse_int(values[pc]) if pc and pc in values else None,
        value_as_number=parse_float(values["value_as_number"]) if "value_as_number" in values else None,
        unit_concept_id=parse_int(values["unit_concept_id"]) if "unit_concept_id" in values else None,
        unit_source_value=unit if unit else None,
        start_datetime=start,
        end_datetime=end,
        end_is_date=end_is_date,
        fields=values,
        row_index=row_index,
    )


def canonical_field(kind: str, text: str) -> str:
    """Canonical text for one cell; unparseable text is kept verbatim."""
    if not text.strip():
        return ""
    try:
        if kind in (ID, CONCEPT):
            v = parse_int(text)
            return text if v is None else str(v)
        if kind == NUMERIC:
            v = parse_float(text)
            return text if v is None else repr(v)
        if kind == DATETIME:
            return format_datetime(parse_datetime(text))
        if kind == DATE:
            return format_date(parse_datetime(text))
    except ValueError:
        return text
    return text


def serialize_record(schema: TableSchema, record: Record,
                     columns: Optional[Sequence[str]] = None) -> List[str]:
    """Canonicalized field list for ``record`` in ``columns`` order."""
    columns = list(columns) if columns is not None else schema.column_names
    types = schema.types
    return [canonical_field(types.get(c, TEXT), record.fields.get(c, "")) for c in columns]


def date_only(d: date) -> datetime:
    return datetime.combine(d, time())
