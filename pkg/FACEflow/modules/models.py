"""
This module defines the SQLAlchemy model for storing evaluation records.

Every row is one metric value of one reenacted frame, tagged with the run and the evaluation
protocol it came from, so results of several checkpoints can be compared in a single database.

Classes:
    Base: the declarative base of the results database.
    EvalRecordRow: a stored evaluation record.
"""
from sqlalchemy import DateTime, Float, Integer, String, func
from sqlalchemy.orm import DeclarativeBase, Mapped, mapped_column


class Base(DeclarativeBase):
    pass


class EvalRecordRow(Base):
    """
    Represents one evaluation record in the results database.

    :ivar id: Surrogate primary key.
    :type id: int
    :ivar run: Name of the run (usually the checkpoint directory name).
    :type run: str
    :ivar protocol: ``self`` or ``cross``.
    :type protocol: str
    :ivar video: Video (identity) id of the reenacted frame.
    :type video: str
    :ivar frame: Frame index within the video.
    :type frame: int
    :ivar metric: Metric name from the closed metric registry.
    :type metric: str
    :ivar value: The metric value.
    :type value: float
    :ivar created: Timestamp of insertion.
    :type created: datetime
    """
    __tablename__ = 'eval_records'

    id: Mapped[int] = mapped_column(Integer, primary_key=True, autoincrement=True)
    run: Mapped[str] = mapped_column(String(200), nullable=False)
    protocol: Mapped[str] = mapped_column(String(20), nullable=False)
    video: Mapped[str] = mapped_column(String(200), nullable=False)
    frame: Mapped[int] = mapped_column(Integer, nullable=False)
    metric: Mapped[str] = mapped_column(String(20), nullable=False)
    value: Mapped[float] = mapped_column(Float, nullable=False)
    created = mapped_column(DateTime, default=func.current_timestamp())

    def __repr__(self):
        return f'<EvalRecord {self.run} {self.video}/{self.frame} {self.metric}={self.value}>'
