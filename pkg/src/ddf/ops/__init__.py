from .csvio import CsvError, read_csv, read_csv_partitioned, write_csv_partitioned
from .distributed import (STAGES, GroupByStrategy, JoinAlgorithm, SortStrategy, broadcast_join,
                          column_aggregate, difference, groupby, join, map_column, project,
                          rolling_window, select, sort, union_distinct, unique)
from .local import AggFunc, AggSpec, JoinKind

__all__ = [
    "CsvError", "read_csv", "read_csv_partitioned", "write_csv_partitioned", "STAGES",
    "GroupByStrategy", "JoinAlgorithm", "SortStrategy", "broadcast_join", "column_aggregate",
    "difference", "groupby", "join", "map_column", "project", "rolling_window", "select", "sort",
    "union_distinct", "unique", "AggFunc", "AggSpec", "JoinKind",
]
